//! Differentiable tensor ops.
//!
//! Each op computes its value eagerly and records a backward closure built
//! from these same ops, which is what makes second-order differentiation
//! (backward-through-backward) work. Masks arising from piecewise-linear
//! functions (abs, leaky ReLU, clamp) are treated as constants, which is the
//! almost-everywhere-correct convention.

mod conv;
mod pool;

pub use conv::{conv2d, conv2d_input_grad, conv2d_weight_grad};
pub use pool::{avg_pool2, avg_unpool2};

use crate::par::{for_each_chunk_mut, map_indices, ELEMENTWISE_CHUNK};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn ew_unary<E: Scalar>(x: &[E], f: impl Fn(E) -> E + Sync) -> Vec<E> {
    let mut out = x.to_vec();
    for_each_chunk_mut(&mut out, ELEMENTWISE_CHUNK, |_, c| {
        for v in c.iter_mut() {
            *v = f(*v);
        }
    });
    out
}

pub(crate) fn ew_binary<E: Scalar>(a: &[E], b: &[E], f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    assert_eq!(a.len(), b.len());
    let mut out = a.to_vec();
    for_each_chunk_mut(&mut out, ELEMENTWISE_CHUNK, |i, c| {
        let off = i * ELEMENTWISE_CHUNK;
        let len = c.len();
        for (v, bv) in c.iter_mut().zip(&b[off..off + len]) {
            *v = f(*v, *bv);
        }
    });
    out
}

fn assert_same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_same_shape(a, b, "add");
    let data = ew_binary(&a.data(), &b.data(), |x, y| x + y);
    let (na, nb) = (a.needs_grad(), b.needs_grad());
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| g.clone()),
                nb.then(|| g.clone()),
            ]
        }),
    )
}

pub fn sub<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_same_shape(a, b, "sub");
    let data = ew_binary(&a.data(), &b.data(), |x, y| x - y);
    let (na, nb) = (a.needs_grad(), b.needs_grad());
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| vec![na.then(|| g.clone()), nb.then(|| neg(g))]),
    )
}

pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_same_shape(a, b, "mul");
    let data = ew_binary(&a.data(), &b.data(), |x, y| x * y);
    let (na, nb) = (a.needs_grad(), b.needs_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| mul(g, &bc)),
                nb.then(|| mul(g, &ac)),
            ]
        }),
    )
}

pub fn div<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_same_shape(a, b, "div");
    let data = ew_binary(&a.data(), &b.data(), |x, y| x / y);
    let (na, nb) = (a.needs_grad(), b.needs_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| div(g, &bc)),
                nb.then(|| neg(&mul(g, &div(&ac, &mul(&bc, &bc))))),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

pub fn neg<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| -v);
    let n = x.needs_grad();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| neg(g))]),
    )
}

pub fn add_scalar<E: Scalar>(x: &Tensor<E>, c: E) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| v + c);
    let n = x.needs_grad();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| g.clone())]),
    )
}

pub fn mul_scalar<E: Scalar>(x: &Tensor<E>, c: E) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| v * c);
    let n = x.needs_grad();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| mul_scalar(g, c))]),
    )
}

pub fn exp<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| v.exp());
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| mul(g, &exp(&xc)))]),
    )
}

pub fn ln<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| v.ln());
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| div(g, &xc))]),
    )
}

pub fn sqrt<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| v.sqrt());
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            vec![n.then(|| mul_scalar(&div(g, &sqrt(&xc)), E::from_f64(0.5)))]
        }),
    )
}

pub fn tanh<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| v.tanh());
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            vec![n.then(|| {
                let t = tanh(&xc);
                mul(g, &add_scalar(&neg(&mul(&t, &t)), E::one()))
            })]
        }),
    )
}

pub fn sigmoid<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let one = E::one();
    let data = ew_unary(&x.data(), move |v| one / (one + (-v).exp()));
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            vec![n.then(|| {
                let s = sigmoid(&xc);
                mul(g, &mul(&s, &add_scalar(&neg(&s), E::one())))
            })]
        }),
    )
}

pub fn abs<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data = ew_unary(&x.data(), |v| v.abs());
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            vec![n.then(|| {
                let mask = Tensor::from_vec(
                    ew_unary(&xc.data(), |v| {
                        if v > E::zero() {
                            E::one()
                        } else if v < E::zero() {
                            -E::one()
                        } else {
                            E::zero()
                        }
                    }),
                    xc.shape(),
                );
                mul(g, &mask)
            })]
        }),
    )
}

/// Integer power, `n >= 1`.
pub fn powi<E: Scalar>(x: &Tensor<E>, n: i32) -> Tensor<E> {
    assert!(n >= 1, "powi exponent must be >= 1");
    let data = ew_unary(&x.data(), |v| v.powi(n));
    let needs = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            vec![needs.then(|| {
                let base = if n == 1 {
                    Tensor::ones(xc.shape())
                } else {
                    powi(&xc, n - 1)
                };
                mul_scalar(&mul(g, &base), E::from_f64(n as f64))
            })]
        }),
    )
}

pub fn leaky_relu<E: Scalar>(x: &Tensor<E>, slope: E) -> Tensor<E> {
    let data = ew_unary(&x.data(), move |v| if v > E::zero() { v } else { v * slope });
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            vec![n.then(|| {
                let mask = Tensor::from_vec(
                    ew_unary(&xc.data(), move |v| if v > E::zero() { E::one() } else { slope }),
                    xc.shape(),
                );
                mul(g, &mask)
            })]
        }),
    )
}

pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    leaky_relu(x, E::zero())
}

/// Clamp into `[lo, hi]`; gradient passes through strictly inside the range.
pub fn clamp<E: Scalar>(x: &Tensor<E>, lo: E, hi: E) -> Tensor<E> {
    assert!(lo < hi);
    let data = ew_unary(&x.data(), move |v| {
        if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v
        }
    });
    let n = x.needs_grad();
    let xc = x.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            vec![n.then(|| {
                let mask = Tensor::from_vec(
                    ew_unary(&xc.data(), move |v| {
                        if v > lo && v < hi {
                            E::one()
                        } else {
                            E::zero()
                        }
                    }),
                    xc.shape(),
                );
                mul(g, &mask)
            })]
        }),
    )
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

fn gemm_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    E::gemm(
        m, k, n,
        E::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        E::zero(),
        &mut c, n as isize, 1,
    );
    c
}

/// `a [m,k] @ b [k,n] -> [m,n]`
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let data = gemm_nn(&a.data(), &b.data(), m, k, n);
    let (na, nb) = (a.needs_grad(), b.needs_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| matmul_nt(g, &bc)),
                nb.then(|| matmul_tn(&ac, g)),
            ]
        }),
    )
}

/// `a [m,p] @ b^T, b [n,p] -> [m,n]`
pub fn matmul_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, p) = (a.shape()[0], a.shape()[1]);
    let (n, p2) = (b.shape()[0], b.shape()[1]);
    assert_eq!(p, p2, "matmul_nt inner dims {p} vs {p2}");
    let mut c = vec![E::zero(); m * n];
    E::gemm(
        m, p, n,
        E::one(),
        &a.data(), p as isize, 1,
        &b.data(), 1, p as isize,
        E::zero(),
        &mut c, n as isize, 1,
    );
    let (na, nb) = (a.needs_grad(), b.needs_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        c,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| matmul(g, &bc)),
                nb.then(|| matmul_tn(g, &ac)),
            ]
        }),
    )
}

/// `a^T @ b, a [p,m], b [p,n] -> [m,n]`
pub fn matmul_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (p, m) = (a.shape()[0], a.shape()[1]);
    let (p2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(p, p2, "matmul_tn inner dims {p} vs {p2}");
    let mut c = vec![E::zero(); m * n];
    E::gemm(
        m, p, n,
        E::one(),
        &a.data(), 1, m as isize,
        &b.data(), n as isize, 1,
        E::zero(),
        &mut c, n as isize, 1,
    );
    let (na, nb) = (a.needs_grad(), b.needs_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        c,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| matmul_nt(&bc, g)),
                nb.then(|| matmul(&ac, g)),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// Reductions and broadcasting
// ---------------------------------------------------------------------------

pub fn sum_all<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    // Fixed-size chunked summation: deterministic in both execution modes.
    let guard = x.data();
    let xd: &[E] = &guard;
    let partials = map_indices(xd.len().div_ceil(ELEMENTWISE_CHUNK).max(1), |i| {
        let lo = i * ELEMENTWISE_CHUNK;
        let hi = (lo + ELEMENTWISE_CHUNK).min(xd.len());
        let mut s = E::zero();
        for v in &xd[lo..hi] {
            s = s + *v;
        }
        s
    });
    let mut total = E::zero();
    for p in partials {
        total = total + p;
    }
    drop(guard);
    let n = x.needs_grad();
    let in_shape = x.shape().to_vec();
    Tensor::from_op(
        vec![total],
        vec![1],
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| broadcast_to(g, &in_shape))]),
    )
}

pub fn mean_all<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let inv = E::from_f64(1.0 / x.len() as f64);
    mul_scalar(&sum_all(x), inv)
}

/// Sum over `axes`, keeping reduced dims as size 1.
pub fn sum_axes<E: Scalar>(x: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let mut ax: Vec<usize> = axes.to_vec();
    ax.sort_unstable();
    ax.dedup();
    assert!(ax.iter().all(|&a| a < rank), "axis out of range");
    let mut out_shape = shape.clone();
    for &a in &ax {
        out_shape[a] = 1;
    }

    // Fast path: reducing a contiguous suffix of axes.
    let suffix_start = rank - ax.len();
    let is_suffix = ax.iter().enumerate().all(|(i, &a)| a == suffix_start + i);
    // Fast path: per-channel reduction of a 4-d tensor (axes {0,2,3}),
    // the adjoint of broadcasting a [1,C,1,1] parameter.
    let is_channel_reduce = rank == 4 && ax == [0, 2, 3];
    let data = if is_suffix {
        let rows: usize = shape[..suffix_start].iter().product();
        let cols: usize = shape[suffix_start..].iter().product();
        let guard = x.data();
        let xd: &[E] = &guard;
        map_indices(rows, |r| {
            let mut s = E::zero();
            for v in &xd[r * cols..(r + 1) * cols] {
                s = s + *v;
            }
            s
        })
    } else if is_channel_reduce {
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let guard = x.data();
        let xd: &[E] = &guard;
        map_indices(c, |ch| {
            let mut s = E::zero();
            for img in 0..n {
                for v in &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                    s = s + *v;
                }
            }
            s
        })
    } else {
        let xd = x.data();
        let mut out = vec![E::zero(); out_shape.iter().product()];
        let in_strides = strides_of(&shape);
        let out_strides = strides_of(&out_shape);
        let mut idx = vec![0usize; rank];
        for v in xd.iter() {
            let mut o = 0usize;
            for d in 0..rank {
                if out_shape[d] != 1 {
                    o += idx[d] * out_strides[d];
                }
            }
            out[o] = out[o] + *v;
            // increment multi-index
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
            let _ = in_strides;
        }
        out
    };

    let n = x.needs_grad();
    let in_shape = shape;
    Tensor::from_op(
        data,
        out_shape,
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| broadcast_to(g, &in_shape))]),
    )
}

pub fn mean_axes<E: Scalar>(x: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let reduced: usize = {
        let mut ax: Vec<usize> = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        ax.iter().map(|&a| x.shape()[a]).product()
    };
    mul_scalar(&sum_axes(x, axes), E::from_f64(1.0 / reduced as f64))
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Broadcast `x` to `target`. `x` must either be a single-element tensor or
/// have the same rank as `target` with size-1 axes where they differ.
pub fn broadcast_to<E: Scalar>(x: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    let out_len: usize = target.iter().product();
    let n = x.needs_grad();

    if x.len() == 1 {
        let v = x.data()[0];
        let xc_shape = x.shape().to_vec();
        let mut data = vec![v; out_len];
        for_each_chunk_mut(&mut data, ELEMENTWISE_CHUNK, |_, c| {
            for e in c.iter_mut() {
                *e = v;
            }
        });
        return Tensor::from_op(
            data,
            target.to_vec(),
            vec![x.clone()],
            Box::new(move |g| vec![n.then(|| reshape(&sum_all(g), &xc_shape))]),
        );
    }

    let in_shape = x.shape().to_vec();
    assert_eq!(
        in_shape.len(),
        target.len(),
        "broadcast_to: rank mismatch {:?} -> {:?}",
        in_shape,
        target
    );
    let mut expanded_axes = Vec::new();
    for (d, (&i, &t)) in in_shape.iter().zip(target).enumerate() {
        if i != t {
            assert_eq!(i, 1, "broadcast_to: incompatible dim {d}: {i} -> {t}");
            expanded_axes.push(d);
        }
    }
    if expanded_axes.is_empty() {
        // Identity broadcast; still record so gradients flow.
        let data = x.to_vec();
        return Tensor::from_op(
            data,
            target.to_vec(),
            vec![x.clone()],
            Box::new(move |g| vec![n.then(|| g.clone())]),
        );
    }

    let guard = x.data();
    let xd: &[E] = &guard;
    let rank = target.len();
    let out_strides = strides_of(target);
    let in_strides = strides_of(&in_shape);
    let mut data = vec![E::zero(); out_len];

    // Fast path: expanding only trailing axes over a row structure
    // [d0, ..., dk, 1, 1] -> broadcast of contiguous rows.
    let suffix_start = rank - expanded_axes.len();
    let is_suffix = expanded_axes
        .iter()
        .enumerate()
        .all(|(i, &a)| a == suffix_start + i)
        && in_shape[suffix_start..].iter().all(|&d| d == 1);
    // Fast path: expanding only leading axes, e.g. [1,K] -> [N,K].
    let is_leading = expanded_axes
        .iter()
        .enumerate()
        .all(|(i, &a)| a == i)
        && in_shape[..expanded_axes.len()].iter().all(|&d| d == 1);
    // Fast path: per-channel parameter [1,C,1,1] -> [N,C,H,W].
    let is_channel_param =
        rank == 4 && in_shape[0] == 1 && in_shape[2] == 1 && in_shape[3] == 1;
    if is_suffix {
        let cols: usize = target[suffix_start..].iter().product();
        for_each_chunk_mut(&mut data, cols, |r, chunk| {
            let v = xd[r];
            for e in chunk.iter_mut() {
                *e = v;
            }
        });
    } else if is_leading {
        let block = xd.len();
        for_each_chunk_mut(&mut data, block, |_, chunk| {
            chunk.copy_from_slice(xd);
        });
    } else if is_channel_param {
        let c = target[1];
        let hw = target[2] * target[3];
        for_each_chunk_mut(&mut data, hw, |plane, chunk| {
            let v = xd[plane % c];
            for e in chunk.iter_mut() {
                *e = v;
            }
        });
    } else {
        let mut idx = vec![0usize; rank];
        for e in data.iter_mut() {
            let mut o = 0usize;
            for d in 0..rank {
                if in_shape[d] != 1 {
                    o += idx[d] * in_strides[d];
                }
            }
            *e = xd[o];
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < target[d] {
                    break;
                }
                idx[d] = 0;
            }
            let _ = out_strides;
        }
    }
    drop(guard);

    Tensor::from_op(
        data,
        target.to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| sum_axes(g, &expanded_axes))]),
    )
}

pub fn reshape<E: Scalar>(x: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
    assert_eq!(
        x.len(),
        shape.iter().product::<usize>(),
        "reshape: cannot reshape {:?} to {:?}",
        x.shape(),
        shape
    );
    let n = x.needs_grad();
    let in_shape = x.shape().to_vec();
    Tensor::from_op(
        x.to_vec(),
        shape.to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![n.then(|| reshape(g, &in_shape))]),
    )
}

// ---------------------------------------------------------------------------
// Channel concat / slice (NCHW)
// ---------------------------------------------------------------------------

/// Concatenate 4-d tensors along the channel axis.
pub fn concat_c<E: Scalar>(parts: &[&Tensor<E>]) -> Tensor<E> {
    assert!(!parts.is_empty());
    let (n, _, h, w) = shape4(parts[0]);
    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    for p in parts {
        let (pn, _, ph, pw) = shape4(p);
        assert!(pn == n && ph == h && pw == w, "concat_c: incompatible shapes");
    }
    let mut data = vec![E::zero(); n * total_c * h * w];
    let hw = h * w;
    let mut off_c = 0usize;
    for p in parts {
        let pc = p.shape()[1];
        let pd = p.data();
        for img in 0..n {
            let src = &pd[img * pc * hw..(img + 1) * pc * hw];
            let dst = &mut data[img * total_c * hw + off_c * hw..][..pc * hw];
            dst.copy_from_slice(src);
        }
        off_c += pc;
    }
    let needs: Vec<bool> = parts.iter().map(|p| p.needs_grad()).collect();
    let channel_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    Tensor::from_op(
        data,
        vec![n, total_c, h, w],
        parts.iter().map(|p| (*p).clone()).collect(),
        Box::new(move |g| {
            let mut out = Vec::with_capacity(channel_sizes.len());
            let mut start = 0usize;
            for (i, &c) in channel_sizes.iter().enumerate() {
                out.push(needs[i].then(|| slice_c(g, start, c)));
                start += c;
            }
            out
        }),
    )
}

/// Channel slice `[start, start+len)` of an NCHW tensor.
pub fn slice_c<E: Scalar>(x: &Tensor<E>, start: usize, len: usize) -> Tensor<E> {
    let (n, c, h, w) = shape4(x);
    assert!(start + len <= c, "slice_c out of range");
    let hw = h * w;
    let xd = x.data();
    let mut data = vec![E::zero(); n * len * hw];
    for img in 0..n {
        let src = &xd[img * c * hw + start * hw..][..len * hw];
        data[img * len * hw..(img + 1) * len * hw].copy_from_slice(src);
    }
    drop(xd);
    let needs = x.needs_grad();
    Tensor::from_op(
        data,
        vec![n, len, h, w],
        vec![x.clone()],
        Box::new(move |g| vec![needs.then(|| scatter_c(g, c, start))]),
    )
}

/// Embed an NCHW tensor into `total_c` channels at offset `start`, zero
/// elsewhere. Adjoint of [`slice_c`].
pub fn scatter_c<E: Scalar>(x: &Tensor<E>, total_c: usize, start: usize) -> Tensor<E> {
    let (n, c, h, w) = shape4(x);
    assert!(start + c <= total_c);
    let hw = h * w;
    let xd = x.data();
    let mut data = vec![E::zero(); n * total_c * hw];
    for img in 0..n {
        let src = &xd[img * c * hw..(img + 1) * c * hw];
        data[img * total_c * hw + start * hw..][..c * hw].copy_from_slice(src);
    }
    drop(xd);
    let needs = x.needs_grad();
    Tensor::from_op(
        data,
        vec![n, total_c, h, w],
        vec![x.clone()],
        Box::new(move |g| vec![needs.then(|| slice_c(g, start, c))]),
    )
}

pub(crate) fn shape4<E: Scalar>(x: &Tensor<E>) -> (usize, usize, usize, usize) {
    assert_eq!(x.shape().len(), 4, "expected 4-d tensor, got {:?}", x.shape());
    (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3])
}

// ---------------------------------------------------------------------------
// Fused per-channel broadcast arithmetic
// ---------------------------------------------------------------------------

fn nc_param_axes<E: Scalar>(x: &Tensor<E>, s: &Tensor<E>) -> (usize, Vec<usize>) {
    let (n, c, _, _) = shape4(x);
    let ss = s.shape();
    assert_eq!(ss.len(), 4, "per-channel operand must be 4-d");
    assert!(
        ss[1] == c && ss[2] == 1 && ss[3] == 1 && (ss[0] == n || ss[0] == 1),
        "per-channel operand shape {:?} incompatible with {:?}",
        ss,
        x.shape()
    );
    if ss[0] == 1 {
        (1, vec![0, 2, 3])
    } else {
        (n, vec![2, 3])
    }
}

fn nc_apply<E: Scalar>(x: &Tensor<E>, s: &Tensor<E>, f: impl Fn(E, E) -> E + Sync + Send) -> Vec<E> {
    let (_, c, h, w) = shape4(x);
    let (sn, _) = nc_param_axes(x, s);
    let hw = h * w;
    let sg = s.data();
    let sd: &[E] = &sg;
    let mut out = x.to_vec();
    for_each_chunk_mut(&mut out, hw, |plane, chunk| {
        let v = if sn == 1 { sd[plane % c] } else { sd[plane] };
        for e in chunk.iter_mut() {
            *e = f(*e, v);
        }
    });
    out
}

/// `x [N,C,H,W] * s`, where `s` is `[N,C,1,1]` or `[1,C,1,1]`, broadcast
/// over the spatial (and possibly batch) axes without materializing the
/// broadcast operand.
pub fn mul_nc<E: Scalar>(x: &Tensor<E>, s: &Tensor<E>) -> Tensor<E> {
    let (_, axes) = nc_param_axes(x, s);
    let data = nc_apply(x, s, |a, b| a * b);
    let (nx, ns) = (x.needs_grad(), s.needs_grad());
    let (xc, sc) = (x.clone(), s.clone());
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), s.clone()],
        Box::new(move |g| {
            vec![
                nx.then(|| mul_nc(g, &sc)),
                ns.then(|| sum_axes(&mul(g, &xc), &axes)),
            ]
        }),
    )
}

/// `x [N,C,H,W] + s` with the same broadcast rules as [`mul_nc`].
pub fn add_nc<E: Scalar>(x: &Tensor<E>, s: &Tensor<E>) -> Tensor<E> {
    let (_, axes) = nc_param_axes(x, s);
    let data = nc_apply(x, s, |a, b| a + b);
    let (nx, ns) = (x.needs_grad(), s.needs_grad());
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), s.clone()],
        Box::new(move |g| {
            vec![nx.then(|| g.clone()), ns.then(|| sum_axes(g, &axes))]
        }),
    )
}

/// Row-wise maximum of a 2-d tensor as a constant (no gradient). Used for
/// numerically stable softmax, where the shift cancels exactly.
pub fn max_axis1_const<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    assert_eq!(x.shape().len(), 2);
    let (n, k) = (x.shape()[0], x.shape()[1]);
    assert!(k > 0);
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let row = &xd[r * k..(r + 1) * k];
        let mut m = row[0];
        for v in &row[1..] {
            if *v > m {
                m = *v;
            }
        }
        out.push(m);
    }
    drop(xd);
    Tensor::from_vec(out, &[n, 1])
}
