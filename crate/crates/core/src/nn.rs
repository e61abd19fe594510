//! Neural primitives with analytic backward passes.
//!
//! Conventions: a linear layer stores `weight` as `[in, out]` and computes
//! `y = x · weight + bias`, with `x` either `[in]` or `[n, in]`. Pooling and
//! convolution operate on `[C, H, W]` feature maps.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

type GradFn<G> = Box<dyn Fn(&Tensor) -> Result<G>>;

/// A forward value paired with its vector-Jacobian product.
pub struct GradPair<G> {
    pub value: Tensor,
    grad_fn: GradFn<G>,
}

impl<G> GradPair<G> {
    pub fn new(value: Tensor, grad_fn: impl Fn(&Tensor) -> Result<G> + 'static) -> Self {
        Self {
            value,
            grad_fn: Box::new(grad_fn),
        }
    }

    /// Map an upstream gradient (shaped like `value`) to input gradients.
    pub fn backward(&self, upstream: &Tensor) -> Result<G> {
        if upstream.shape() != self.value.shape() {
            return Err(dim_err("backward", self.value.shape(), upstream.shape()));
        }
        (self.grad_fn)(upstream)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn as_matrix(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        1 => x.clone().reshape(&[1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(dim_err("linear", x.shape(), &[0, 0])),
    }
}

/// `x · weight + bias`; the output keeps the rank of `x`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xm = as_matrix(x)?;
    let (_, out) = weight.dims2()?;
    if bias.len() != out {
        return Err(dim_err("linear bias", weight.shape(), bias.shape()));
    }
    let mut y = xm.matmul(weight).map_err(|_| dim_err("linear", x.shape(), weight.shape()))?;
    let cols = out;
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += bias[i % cols];
    }
    if x.rank() == 1 {
        y = y.reshape(&[out])?;
    }
    Ok(y)
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<LinearGrads> {
    let xm = as_matrix(x)?;
    let um = as_matrix(upstream)?;
    let (_, out) = weight.dims2()?;
    let input = um.matmul(&weight.transpose()?)?.reshape(x.shape())?;
    let dweight = xm.transpose()?.matmul(&um)?;
    let mut bias = vec![0.0; out];
    for (i, v) in um.data().iter().enumerate() {
        bias[i % out] += v;
    }
    Ok(LinearGrads {
        input,
        weight: dweight,
        bias: Tensor::vector(&bias),
    })
}

pub fn linear_vjp(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<GradPair<LinearGrads>> {
    let value = linear(x, weight, bias)?;
    let (x, weight) = (x.clone(), weight.clone());
    Ok(GradPair::new(value, move |up| linear_backward(&x, &weight, up)))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, "relu_backward", |v, u| if v > 0.0 { u } else { 0.0 })
}

pub fn relu_vjp(x: &Tensor) -> GradPair<Tensor> {
    let value = relu(x);
    let x = x.clone();
    GradPair::new(value, move |up| relu_backward(&x, up))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward expressed through the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    y.zip_map(upstream, "sigmoid_backward", |s, u| u * s * (1.0 - s))
}

pub fn sigmoid_vjp(x: &Tensor) -> GradPair<Tensor> {
    let value = sigmoid(x);
    let y = value.clone();
    GradPair::new(value, move |up| sigmoid_backward(&y, up))
}

/// Outer size, axis length and inner stride for iterating along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::OutOfRange(alloc::format!(
            "axis {axis} for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = libm::exp(d[idx(j)] - max);
                d[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                d[idx(j)] /= total;
            }
        }
    }
    Ok(out)
}

/// Backward through the softmax output `y`: `y ⊙ (u − Σ u⊙y)`.
pub fn softmax_backward(y: &Tensor, upstream: &Tensor, axis: usize) -> Result<Tensor> {
    if y.shape() != upstream.shape() {
        return Err(dim_err("softmax_backward", y.shape(), upstream.shape()));
    }
    let (outer, n, inner) = axis_layout(y.shape(), axis)?;
    let mut out = Tensor::zeros(y.shape());
    let (yd, ud) = (y.data(), upstream.data());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| yd[idx(j)] * ud[idx(j)]).sum();
            for j in 0..n {
                od[idx(j)] = yd[idx(j)] * (ud[idx(j)] - dot);
            }
        }
    }
    Ok(out)
}

pub fn softmax_vjp(x: &Tensor, axis: usize) -> Result<GradPair<Tensor>> {
    let value = softmax(x, axis)?;
    let y = value.clone();
    Ok(GradPair::new(value, move |up| softmax_backward(&y, up, axis)))
}

fn chw(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(dim_err(op, s, &[0, 0, 0])),
    }
}

/// Window `[start, end)` of output cell `i` when pooling `len` inputs into `out` cells.
pub fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn adaptive_pool(
    x: &Tensor,
    out: (usize, usize),
    op: &'static str,
    reduce: impl Fn(&mut dyn Iterator<Item = f64>, usize) -> f64,
) -> Result<Tensor> {
    let (c, h, w) = chw(x, op)?;
    let (oh, ow) = out;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(dim_err(op, x.shape(), &[c, oh, ow]));
    }
    let d = x.data();
    let mut res = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            let (r0, r1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = pool_window(j, w, ow);
                let mut it = (r0..r1).flat_map(|r| (c0..c1).map(move |cc| d[(ch * h + r) * w + cc]));
                res.push(reduce(&mut it, (r1 - r0) * (c1 - c0)));
            }
        }
    }
    Tensor::new(&[c, oh, ow], res)
}

/// Adaptive max pooling of a `[C, H, W]` map to `[C, oh, ow]`.
pub fn adaptive_max_pool(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    adaptive_pool(x, out, "adaptive_max_pool", |it, _| it.fold(f64::NEG_INFINITY, f64::max))
}

/// Adaptive average pooling of a `[C, H, W]` map to `[C, oh, ow]`.
pub fn adaptive_avg_pool(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    adaptive_pool(x, out, "adaptive_avg_pool", |it, n| it.sum::<f64>() / n as f64)
}

/// 3×3 convolution, stride 1, zero padding 1.
///
/// `kernel` is `[C_out, C_in, 3, 3]`, `bias` is `[C_out]`. Forward only.
pub fn conv3x3(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, h, w) = chw(x, "conv3x3")?;
    let (c_out, k_in) = match kernel.shape() {
        [co, ci, 3, 3] => (*co, *ci),
        s => return Err(dim_err("conv3x3 kernel", s, &[0, c_in, 3, 3])),
    };
    if k_in != c_in {
        return Err(dim_err("conv3x3", x.shape(), kernel.shape()));
    }
    if bias.len() != c_out {
        return Err(dim_err("conv3x3 bias", kernel.shape(), bias.shape()));
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        for r in 0..h {
            for c in 0..w {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for dr in 0..3 {
                        let rr = r as isize + dr as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for dc in 0..3 {
                            let cc = c as isize + dc as isize - 1;
                            if cc < 0 || cc >= w as isize {
                                continue;
                            }
                            acc += kd[((co * c_in + ci) * 3 + dr) * 3 + dc]
                                * xd[(ci * h + rr as usize) * w + cc as usize];
                        }
                    }
                }
                out[(co * h + r) * w + c] = acc;
            }
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Cached intermediates of a single-head attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Tensor,
    scale: f64,
}

impl AttentionCache {
    /// Row-stochastic attention matrix `[Tq, Tk]`.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

/// `softmax(q·kᵀ / √d_k) · v` where `d_k` is the feature width of `q` and `k`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attention_forward(q, k, v)?.0)
}

pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, AttentionCache)> {
    let (_, dq) = q.dims2()?;
    let (tk, dk) = k.dims2()?;
    let (tv, _) = v.dims2()?;
    if dq != dk {
        return Err(dim_err("attention q/k", q.shape(), k.shape()));
    }
    if tk != tv {
        return Err(dim_err("attention k/v", k.shape(), v.shape()));
    }
    let scale = 1.0 / libm::sqrt(dk as f64);
    let logits = q.matmul(&k.transpose()?)?.scale(scale);
    let weights = softmax(&logits, 1)?;
    let out = weights.matmul(v)?;
    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights,
            scale,
        },
    ))
}

pub fn attention_backward(cache: &AttentionCache, upstream: &Tensor) -> Result<AttentionGrads> {
    let dv = cache.weights.transpose()?.matmul(upstream)?;
    let dweights = upstream.matmul(&cache.v.transpose()?)?;
    let dlogits = softmax_backward(&cache.weights, &dweights, 1)?.scale(cache.scale);
    let dq = dlogits.matmul(&cache.k)?;
    let dk = dlogits.transpose()?.matmul(&cache.q)?;
    Ok(AttentionGrads { q: dq, k: dk, v: dv })
}

pub fn attention_vjp(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<GradPair<AttentionGrads>> {
    let (value, cache) = attention_forward(q, k, v)?;
    Ok(GradPair::new(value, move |up| attention_backward(&cache, up)))
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err("cosine_similarity", a.shape(), b.shape()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm input to cosine similarity"));
    }
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
pub fn cosine_similarity_backward(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let cos = cosine_similarity(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    let ga = a.zip_map(b, "cosine_backward", |x, y| y / (na * nb) - cos * x / (na * na))?;
    let gb = b.zip_map(a, "cosine_backward", |y, x| x / (na * nb) - cos * y / (nb * nb))?;
    Ok((ga.reshape(a.shape())?, gb.reshape(b.shape())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::new(shape, lcg(seed, shape.iter().product())).unwrap()
    }

    #[test]
    fn activations_at_landmarks() {
        assert_eq!(sigmoid(&Tensor::vector(&[0.0]))[0], 0.5);
        let r = relu(&Tensor::vector(&[-3.0, 3.0]));
        assert_eq!(r.data(), &[0.0, 3.0]);
        assert!(sigmoid(&Tensor::vector(&[-800.0, 800.0])).is_finite());
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let u = softmax(&Tensor::vector(&[2.0; 4]), 0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let v = rand_t(4, &[6]);
        let a = softmax(&v, 0).unwrap();
        let b = softmax(&v.map(|x| x + 17.5), 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_extreme_logits() {
        // log-sum-exp oracle: p1 = exp(0 - lse), lse = 1000 + ln(1 + e^-1000)
        let p = softmax(&Tensor::vector(&[1000.0, 0.0]), 0).unwrap();
        assert!(p.is_finite());
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300 && p[1] >= 0.0);
    }

    #[test]
    fn softmax_along_rows_and_columns() {
        let x = rand_t(5, &[3, 4]);
        for axis in 0..2 {
            let y = softmax(&x, axis).unwrap();
            let (r, c) = (3, 4);
            if axis == 1 {
                for i in 0..r {
                    assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            } else {
                for j in 0..c {
                    assert!(((0..r).map(|i| y.get2(i, j)).sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn pool_identity_and_constant() {
        let x = rand_t(6, &[2, 5, 7]);
        assert_eq!(adaptive_max_pool(&x, (5, 7)).unwrap(), x);
        assert!(adaptive_avg_pool(&x, (5, 7)).unwrap().max_abs_diff(&x) < 1e-15);
        let c = Tensor::full(&[1, 6, 6], 3.25);
        for out in [(1, 1), (4, 4), (3, 5)] {
            assert!(adaptive_max_pool(&c, out).unwrap().data().iter().all(|&v| v == 3.25));
            assert!(adaptive_avg_pool(&c, out).unwrap().data().iter().all(|&v| v == 3.25));
        }
        assert!(adaptive_avg_pool(&x, (6, 7)).is_err());
    }

    #[test]
    fn ramp_pool_matches_window_enumeration() {
        // ramp value = 4r + c on a 4x4 plane; 2x2 windows enumerate as
        // {0,1,4,5} {2,3,6,7} {8,9,12,13} {10,11,14,15}
        let x = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let mx = adaptive_max_pool(&x, (2, 2)).unwrap();
        assert_eq!(mx.data(), &[5.0, 7.0, 13.0, 15.0]);
        let av = adaptive_avg_pool(&x, (2, 2)).unwrap();
        assert_eq!(av.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn overlapping_windows_follow_floor_ceil() {
        assert_eq!(pool_window(0, 5, 3), (0, 2));
        assert_eq!(pool_window(1, 5, 3), (1, 4));
        assert_eq!(pool_window(2, 5, 3), (3, 5));
    }

    #[test]
    fn attention_singleton_key_returns_value() {
        let q = rand_t(7, &[3, 4]);
        let k = rand_t(8, &[1, 4]);
        let v = rand_t(9, &[1, 5]);
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert!(out.row(i).iter().zip(v.row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_one_hot_keys_select_rows() {
        let s = 1e3;
        let k = Tensor::from_rows(&[[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]]);
        let q = Tensor::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let v = rand_t(10, &[3, 2]);
        let out = attention(&q, &k, &v).unwrap();
        for (i, sel) in [1usize, 2, 0].iter().enumerate() {
            assert!((out.get2(i, 0) - v.get2(*sel, 0)).abs() < 1e-12);
            assert!((out.get2(i, 1) - v.get2(*sel, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_stochastic_and_dim_errors() {
        let (_, cache) = attention_forward(&rand_t(1, &[4, 3]), &rand_t(2, &[5, 3]), &rand_t(3, &[5, 2])).unwrap();
        for i in 0..4 {
            assert!((cache.weights().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(attention(&rand_t(1, &[4, 3]), &rand_t(2, &[5, 2]), &rand_t(3, &[5, 2])).is_err());
        assert!(attention(&rand_t(1, &[4, 3]), &rand_t(2, &[5, 3]), &rand_t(3, &[4, 2])).is_err());
    }

    #[test]
    fn cosine_landmarks() {
        let a = rand_t(11, &[6]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let c = cosine_similarity(&Tensor::vector(&[1.0, 0.0]), &Tensor::vector(&[1.0, 1.0])).unwrap();
        assert!((c - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&Tensor::zeros(&[2]), &a.clone().reshape(&[6]).unwrap()),
            Err(_)
        ));
        assert!(matches!(
            cosine_similarity(&Tensor::zeros(&[2]), &Tensor::vector(&[1.0, 2.0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = rand_t(12, &[2, 5, 4]);
        let k = rand_t(13, &[3, 2, 3, 3]);
        let b = rand_t(14, &[3]);
        let y = conv3x3(&x, &k, &b).unwrap();
        let px = |c: usize, r: isize, col: isize| {
            if r < 0 || r >= 5 || col < 0 || col >= 4 {
                0.0
            } else {
                x.data()[(c * 5 + r as usize) * 4 + col as usize]
            }
        };
        for co in 0..3 {
            for r in 0..5isize {
                for c in 0..4isize {
                    let mut s = b[co];
                    for ci in 0..2 {
                        for i in -1..=1isize {
                            for j in -1..=1isize {
                                s += k.data()[((co * 2 + ci) * 3 + (i + 1) as usize) * 3 + (j + 1) as usize]
                                    * px(ci, r + i, c + j);
                            }
                        }
                    }
                    assert!((y.data()[(co * 5 + r as usize) * 4 + c as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = rand_t(20, &[3, 4]);
        let w = rand_t(21, &[4, 2]);
        let b = rand_t(22, &[2]);
        let g = linear_vjp(&x, &w, &b).unwrap().backward(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(g.input.norm() == 0.0 && g.weight.norm() == 0.0 && g.bias.norm() == 0.0);
        let g = attention_vjp(&x, &rand_t(23, &[2, 4]), &rand_t(24, &[2, 3]))
            .unwrap()
            .backward(&Tensor::zeros(&[3, 3]))
            .unwrap();
        assert!(g.q.norm() == 0.0 && g.k.norm() == 0.0 && g.v.norm() == 0.0);
        let s = softmax_vjp(&x, 1).unwrap().backward(&Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(s.norm(), 0.0);
        assert_eq!(sigmoid_vjp(&x).backward(&Tensor::zeros(&[3, 4])).unwrap().norm(), 0.0);
        assert_eq!(relu_vjp(&x).backward(&Tensor::zeros(&[3, 4])).unwrap().norm(), 0.0);
    }

    #[test]
    fn linear_backward_matches_central_differences() {
        let x = rand_t(30, &[3, 4]);
        let w = rand_t(31, &[4, 5]);
        let b = rand_t(32, &[5]);
        let up = rand_t(33, &[3, 5]);
        let g = linear_backward(&x, &w, &up).unwrap();
        let f = |xs: &[f64]| {
            let xt = Tensor::new(&[3, 4], xs.to_vec()).unwrap();
            linear(&xt, &w, &b).unwrap().dot(&up).unwrap()
        };
        assert!(grad_check(f, x.data(), g.input.data(), DEFAULT_STEP) < 1e-6);
        let f = |ws: &[f64]| {
            let wt = Tensor::new(&[4, 5], ws.to_vec()).unwrap();
            linear(&x, &wt, &b).unwrap().dot(&up).unwrap()
        };
        assert!(grad_check(f, w.data(), g.weight.data(), DEFAULT_STEP) < 1e-6);
        let f = |bs: &[f64]| linear(&x, &w, &Tensor::vector(bs)).unwrap().dot(&up).unwrap();
        assert!(grad_check(f, b.data(), g.bias.data(), DEFAULT_STEP) < 1e-6);
    }

    #[test]
    fn linear_accepts_vectors() {
        let w = rand_t(40, &[3, 2]);
        let b = rand_t(41, &[2]);
        let v = rand_t(42, &[3]);
        let y = linear(&v, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert!(linear(&rand_t(43, &[4]), &w, &b).is_err());
        assert!(linear(&v, &w, &rand_t(44, &[3])).is_err());
    }

    #[test]
    fn sum_sigmoid_gradient() {
        let x = rand_t(50, &[7]).scale(3.0);
        let analytic = sigmoid_backward(&sigmoid(&x), &Tensor::full(&[7], 1.0)).unwrap();
        let f = |xs: &[f64]| sigmoid(&Tensor::vector(xs)).sum();
        assert!(grad_check(f, x.data(), analytic.data(), DEFAULT_STEP) < 1e-7);
    }

    #[test]
    fn cosine_backward_matches_central_differences() {
        let a = rand_t(60, &[5]);
        let b = rand_t(61, &[5]);
        let (ga, gb) = cosine_similarity_backward(&a, &b).unwrap();
        let fa = |xs: &[f64]| cosine_similarity(&Tensor::vector(xs), &b).unwrap();
        let fb = |xs: &[f64]| cosine_similarity(&a, &Tensor::vector(xs)).unwrap();
        assert!(grad_check(fa, a.data(), ga.data(), DEFAULT_STEP) < 1e-6);
        assert!(grad_check(fb, b.data(), gb.data(), DEFAULT_STEP) < 1e-6);
    }
}
