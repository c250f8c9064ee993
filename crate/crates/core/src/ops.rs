//! Forward and backward passes for the layers the descriptor network uses:
//! valid cross-correlation, tanh, 2×2 max-pooling, fully-connected, and the
//! L2 distance between descriptor vectors.
//!
//! Convolutions lower to im2col plus GEMM. Forward passes run one GEMM per
//! example so an example's output never depends on what else is in the
//! batch; cross-example reductions in the backward passes are single GEMM
//! calls or explicit fixed-order loops, which keeps every result bit-stable
//! for a given input regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Denominator clamp for the L2 distance gradient at coincident vectors.
const L2_GRAD_EPS: f64 = 1e-8;

/// Runs `f(chunk_index, chunk)` over equal-sized chunks, in parallel when
/// there is enough work to be worth it.
fn for_chunks_mut<T: Send, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    if data.len() <= chunk || data.len() < 8192 {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// `C := A·B` into contiguous row-major storage, with C's rows divided
/// across threads. Every output element is one dot product evaluated in the
/// same k order no matter how the rows are divided, so the split cannot
/// change results.
fn gemm_rows_parallel<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
) {
    debug_assert_eq!(c.len(), m * n);
    let threads = rayon::current_num_threads().max(1);
    let single = threads == 1 || m == 1 || m * k * n < (1 << 18);
    let chunks = if single { 1 } else { (threads * 2).min(m) };
    let rows_per = m.div_ceil(chunks);
    let task = |row0: usize, cc: &mut [T]| {
        let rows = cc.len() / n;
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::zero(),
                cc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if chunks == 1 {
        task(0, c);
    } else {
        c.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(i, cc)| task(i * rows_per, cc));
    }
}

/// Writes the im2col matrix of one example: rows indexed by
/// `(channel, ky, kx)`, columns by output position, so the kernel applied at
/// every position becomes a plain matrix product.
fn im2col_example<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    col: &mut [T],
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let ohw = oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for y in 0..oh {
                    let src = &plane[(y + i) * w + j..(y + i) * w + j + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<ConvDims> {
    let (b, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape("conv2d", "input channels", wcin, cin));
    }
    if h < kh {
        return Err(Error::shape("conv2d", "input rows", kh, h));
    }
    if w < kw {
        return Err(Error::shape("conv2d", "input cols", kw, w));
    }
    if let Some(bias) = bias {
        if bias.rank() != 1 || bias.len() != cout {
            return Err(Error::shape("conv2d", "bias length", cout, bias.len()));
        }
    }
    Ok(ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: h - kh + 1,
        ow: w - kw + 1,
    })
}

#[derive(Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

/// Valid cross-correlation, stride 1, no padding.
///
/// `out[b,o,y,x] = bias[o] + Σ_{c,i,j} input[b,c,y+i,x+j] · weight[o,c,i,j]`
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = conv_shapes(input, weight, Some(bias))?;
    let (k, ohw) = (d.k(), d.ohw());
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * ohw;
    let mut out = Tensor::zeros(&[d.b, d.cout, d.oh, d.ow]);
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    for_chunks_mut(out.data_mut(), out_stride, |bi, out_b| {
        let mut col = vec![T::zero(); k * ohw];
        im2col_example(
            &in_data[bi * in_stride..(bi + 1) * in_stride],
            d.cin,
            d.h,
            d.w,
            d.kh,
            d.kw,
            &mut col,
        );
        unsafe {
            T::gemm(
                d.cout,
                k,
                ohw,
                T::one(),
                w_data.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                ohw as isize,
                1,
                T::zero(),
                out_b.as_mut_ptr(),
                ohw as isize,
                1,
            );
        }
        for o in 0..d.cout {
            let add = b_data[o];
            for v in &mut out_b[o * ohw..(o + 1) * ohw] {
                *v = *v + add;
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Full backward pass: `(∂L/∂input, ∂L/∂weight, ∂L/∂bias)` given
/// `∂L/∂output`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (input_grad, weight_grad, bias_grad) = conv2d_backward_impl(input, weight, upstream, true)?;
    Ok(Conv2dGrads {
        input: input_grad.expect("requested input grad"),
        weight: weight_grad,
        bias: bias_grad,
    })
}

/// Parameter gradients only. The first layer of a network has no use for
/// `∂L/∂input`, and skipping it saves the largest single GEMM of the pass.
pub fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, weight_grad, bias_grad) = conv2d_backward_impl(input, weight, upstream, false)?;
    Ok((weight_grad, bias_grad))
}

fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let d = conv_shapes(input, weight, None)?;
    let (ub, uc, uoh, uow) = upstream.dims4("conv2d backward")?;
    if (ub, uc, uoh, uow) != (d.b, d.cout, d.oh, d.ow) {
        let (axis, expected, got) = if ub != d.b {
            ("batch", d.b, ub)
        } else if uc != d.cout {
            ("channels", d.cout, uc)
        } else if uoh != d.oh {
            ("rows", d.oh, uoh)
        } else {
            ("cols", d.ow, uow)
        };
        return Err(Error::shape("conv2d backward", axis, expected, got));
    }

    let (k, ohw) = (d.k(), d.ohw());
    let cols = d.b * ohw;
    let in_stride = d.cin * d.h * d.w;
    let in_data = input.data();
    let up_data = upstream.data();

    // Batched im2col, one row per (channel, ky, kx), columns over (b, y, x).
    let mut colb = vec![T::zero(); k * cols];
    for_chunks_mut(&mut colb, cols, |row, dst| {
        let c = row / (d.kh * d.kw);
        let i = (row / d.kw) % d.kh;
        let j = row % d.kw;
        for bi in 0..d.b {
            let plane = &in_data[bi * in_stride + c * d.h * d.w..];
            for y in 0..d.oh {
                let src = &plane[(y + i) * d.w + j..(y + i) * d.w + j + d.ow];
                dst[bi * ohw + y * d.ow..bi * ohw + (y + 1) * d.ow].copy_from_slice(src);
            }
        }
    });

    // Upstream regrouped as [cout][b·oh·ow] so both GEMMs below see plain
    // strided matrices.
    let mut y2 = vec![T::zero(); d.cout * cols];
    for_chunks_mut(&mut y2, cols, |o, dst| {
        for bi in 0..d.b {
            let src = &up_data[(bi * d.cout + o) * ohw..(bi * d.cout + o + 1) * ohw];
            dst[bi * ohw..(bi + 1) * ohw].copy_from_slice(src);
        }
    });

    // grad_weight = y2 · colbᵀ
    let mut weight_grad = Tensor::zeros(weight.shape());
    unsafe {
        T::gemm(
            d.cout,
            cols,
            k,
            T::one(),
            y2.as_ptr(),
            cols as isize,
            1,
            colb.as_ptr(),
            1,
            cols as isize,
            T::zero(),
            weight_grad.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }

    // grad_bias: plain fixed-order reduction over batch and positions.
    let mut bias_grad = Tensor::zeros(&[d.cout]);
    {
        let gb = bias_grad.data_mut();
        for o in 0..d.cout {
            let mut acc = T::zero();
            for v in &y2[o * cols..(o + 1) * cols] {
                acc = acc + *v;
            }
            gb[o] = acc;
        }
    }

    let input_grad = if want_input_grad {
        // grad_col = weightᵀ · y2, then scattered back with col2im.
        let mut grad_col = vec![T::zero(); k * cols];
        unsafe {
            T::gemm(
                k,
                d.cout,
                cols,
                T::one(),
                weight.data().as_ptr(),
                1,
                k as isize,
                y2.as_ptr(),
                cols as isize,
                1,
                T::zero(),
                grad_col.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        let mut gi = Tensor::zeros(input.shape());
        for_chunks_mut(gi.data_mut(), in_stride, |bi, gin| {
            for row in 0..k {
                let c = row / (d.kh * d.kw);
                let i = (row / d.kw) % d.kh;
                let j = row % d.kw;
                let src = &grad_col[row * cols + bi * ohw..row * cols + (bi + 1) * ohw];
                for y in 0..d.oh {
                    let dst = &mut gin[c * d.h * d.w + (y + i) * d.w + j..];
                    for x in 0..d.ow {
                        dst[x] = dst[x] + src[y * d.ow + x];
                    }
                }
            }
        });
        Some(gi)
    } else {
        None
    };

    Ok((input_grad, weight_grad, bias_grad))
}

/// Elementwise tanh.
pub fn tanh_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for_chunks_mut(out.data_mut(), 4096.min(x.len()), |_, chunk| {
        for v in chunk {
            *v = v.tanh();
        }
    });
    out
}

/// `upstream ⊙ (1 − y_out²)` where `y_out` is the forward output.
pub fn tanh_backward<T: Scalar>(y_out: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    y_out.require_same_shape(upstream, "tanh backward")?;
    let mut out = upstream.clone();
    let chunk = 4096.min(out.len());
    let y_data = y_out.data();
    for_chunks_mut(out.data_mut(), chunk, |ci, dst| {
        let ys = &y_data[ci * chunk..ci * chunk + dst.len()];
        for (v, &y) in dst.iter_mut().zip(ys) {
            *v = *v * (T::one() - y * y);
        }
    });
    Ok(out)
}

/// Which input cell won each disjoint 2×2 window, for routing gradients
/// back through the pooling layer.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    winners: Vec<u32>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let [b, c, h, w] = self.input_shape;
        [b, c, h / 2, w / 2]
    }

    /// Flat input index of the winning cell for each output position.
    pub fn winners(&self) -> &[u32] {
        &self.winners
    }
}

/// 2×2 max-pooling with stride 2. Ties break toward the first cell in
/// row-major window order so training stays reproducible.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (b, c, h, w) = input.dims4("maxpool2")?;
    if h % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("rows extent must be even, got {h}"),
        ));
    }
    if w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("cols extent must be even, got {w}"),
        ));
    }
    assert!(input.len() <= u32::MAX as usize, "pool index overflow");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut winners = vec![0u32; b * c * oh * ow];
    let in_data = input.data();
    let plane = h * w;
    let out_plane = oh * ow;
    let pool_plane = |p: usize, out_p: &mut [T], win_p: &mut [u32]| {
        let base = p * plane;
        let src = &in_data[base..base + plane];
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = (2 * y) * w + 2 * x;
                let mut best = src[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * x + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                out_p[y * ow + x] = best;
                win_p[y * ow + x] = (base + best_idx) as u32;
            }
        }
    };
    // Planes are independent; windows within a plane are disjoint.
    if b * c == 1 || input.len() < 8192 {
        for (p, (out_p, win_p)) in out
            .data_mut()
            .chunks_mut(out_plane)
            .zip(winners.chunks_mut(out_plane))
            .enumerate()
        {
            pool_plane(p, out_p, win_p);
        }
    } else {
        out.data_mut()
            .par_chunks_mut(out_plane)
            .zip(winners.par_chunks_mut(out_plane))
            .enumerate()
            .for_each(|(p, (out_p, win_p))| pool_plane(p, out_p, win_p));
    }
    Ok((
        out,
        PoolIndices {
            input_shape: [b, c, h, w],
            winners,
        },
    ))
}

/// Routes each upstream value to the recorded argmax cell of its window;
/// every other input cell receives zero.
pub fn maxpool2_backward<T: Scalar>(indices: &PoolIndices, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let expect = indices.output_shape();
    if upstream.shape() != expect {
        return Err(Error::invalid(
            "maxpool2 backward",
            format!(
                "upstream shape {:?} does not match pool map output {:?}",
                upstream.shape(),
                expect
            ),
        ));
    }
    let [b, c, h, w] = indices.input_shape;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let plane = h * w;
    let out_plane = (h / 2) * (w / 2);
    let up = upstream.data();
    let winners = &indices.winners;
    for_chunks_mut(out.data_mut(), plane, |p, dst| {
        let base = p * plane;
        for q in 0..out_plane {
            let win = winners[p * out_plane + q] as usize - base;
            dst[win] = dst[win] + up[p * out_plane + q];
        }
    });
    Ok(out)
}

/// Fully-connected layer: `out = x · weightᵀ + bias`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, f) = x.dims2("linear")?;
    let (o, wf) = weight.dims2("linear")?;
    if wf != f {
        return Err(Error::shape("linear", "input features", wf, f));
    }
    if bias.rank() != 1 || bias.len() != o {
        return Err(Error::shape("linear", "bias length", o, bias.len()));
    }
    let mut out = Tensor::zeros(&[b, o]);
    let x_data = x.data();
    let w_data = weight.data();
    let b_data = bias.data();
    for_chunks_mut(out.data_mut(), o, |bi, out_b| {
        unsafe {
            T::gemm(
                o,
                f,
                1,
                T::one(),
                w_data.as_ptr(),
                f as isize,
                1,
                x_data[bi * f..].as_ptr(),
                1,
                1,
                T::zero(),
                out_b.as_mut_ptr(),
                1,
                1,
            );
        }
        for (v, &add) in out_b.iter_mut().zip(b_data) {
            *v = *v + add;
        }
    });
    Ok(out)
}

/// Gradients of [`linear_forward`].
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (b, f) = x.dims2("linear backward")?;
    let (o, wf) = weight.dims2("linear backward")?;
    if wf != f {
        return Err(Error::shape("linear backward", "input features", wf, f));
    }
    let (ub, uo) = upstream.dims2("linear backward")?;
    if ub != b {
        return Err(Error::shape("linear backward", "batch", b, ub));
    }
    if uo != o {
        return Err(Error::shape("linear backward", "outputs", o, uo));
    }

    // grad_x = upstream · W
    let mut input = Tensor::zeros(&[b, f]);
    unsafe {
        T::gemm(
            b,
            o,
            f,
            T::one(),
            upstream.data().as_ptr(),
            o as isize,
            1,
            weight.data().as_ptr(),
            f as isize,
            1,
            T::zero(),
            input.data_mut().as_mut_ptr(),
            f as isize,
            1,
        );
    }

    // grad_w = upstreamᵀ · x
    let mut wgrad = Tensor::zeros(&[o, f]);
    unsafe {
        T::gemm(
            o,
            b,
            f,
            T::one(),
            upstream.data().as_ptr(),
            1,
            o as isize,
            x.data().as_ptr(),
            f as isize,
            1,
            T::zero(),
            wgrad.data_mut().as_mut_ptr(),
            f as isize,
            1,
        );
    }

    let mut bias = Tensor::zeros(&[o]);
    {
        let gb = bias.data_mut();
        let up = upstream.data();
        for bi in 0..b {
            for oi in 0..o {
                gb[oi] = gb[oi] + up[bi * o + oi];
            }
        }
    }

    Ok(LinearGrads {
        input,
        weight: wgrad,
        bias,
    })
}

pub fn l2_distance_slice<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc = acc + d * d;
    }
    acc.sqrt()
}

/// Accumulates `coeff · (a − b) / max(dist, ε)` into `ga` and its negation
/// into `gb` — the chain-rule contribution of one distance to both vectors.
pub fn l2_grad_accumulate<T: Scalar>(
    a: &[T],
    b: &[T],
    dist: T,
    coeff: T,
    ga: &mut [T],
    gb: &mut [T],
) {
    debug_assert_eq!(a.len(), b.len());
    let denom = dist.max(T::from_f64(L2_GRAD_EPS));
    let scale = coeff / denom;
    for i in 0..a.len() {
        let g = (a[i] - b[i]) * scale;
        ga[i] = ga[i] + g;
        gb[i] = gb[i] - g;
    }
}

/// Euclidean distance between two tensors of identical shape.
pub fn l2_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.require_same_shape(b, "l2 distance")?;
    Ok(l2_distance_slice(a.data(), b.data()))
}

/// `(∂/∂a, ∂/∂b)` of `upstream · ‖a − b‖₂`, with the denominator clamped at
/// ε = 1e−8 so coincident vectors do not divide by zero.
pub fn l2_distance_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    upstream: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    a.require_same_shape(b, "l2 distance backward")?;
    let dist = l2_distance_slice(a.data(), b.data());
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    l2_grad_accumulate(
        a.data(),
        b.data(),
        dist,
        upstream,
        ga.data_mut(),
        gb.data_mut(),
    );
    Ok((ga, gb))
}
