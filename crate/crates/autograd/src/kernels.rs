//! Numeric kernels behind the graph operations. All functions are pure and
//! operate on `[n, c, h, w]` tensors unless noted otherwise.

use crate::Tensor;

/// Geometry of a stride-1 square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn same(kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            kernel,
            pad: kernel / 2,
        }
    }

    pub fn output_side(&self, input: usize) -> usize {
        input + 2 * self.pad + 1 - self.kernel
    }
}

/// `c = a · b` (or `c = a · b + c` when `accumulate`), where `a` is `m × k` and
/// `b` is `k × n`. The `*_t` flags mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n extents
    // addressed by the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, cols: &mut [f64]) {
    let (k, p) = (geo.kernel, geo.pad);
    let (ho, wo) = (geo.output_side(h), geo.output_side(w));
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - p as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, x: &mut [f64]) {
    let (k, p) = (geo.kernel, geo.pad);
    let (ho, wo) = (geo.output_side(h), geo.output_side(w));
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(geo: ConvGeometry) -> bool {
    geo.kernel == 1 && geo.pad == 0
}

/// Cross-correlation `y[n, o] = Σ_i w[o, i] ⋆ x[n, i]` without bias.
pub fn conv2d(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!((k, k2), (geo.kernel, geo.kernel), "conv2d: kernel size mismatch");
    let (ho, wo) = (geo.output_side(h), geo.output_side(wd));
    let ckk = cin * k * k;
    let mut out = vec![0.0; n * cout * ho * wo];
    let mut cols = if is_pointwise(geo) {
        Vec::new()
    } else {
        vec![0.0; ckk * ho * wo]
    };
    for b in 0..n {
        let xs = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        let cols_ref: &[f64] = if is_pointwise(geo) {
            xs
        } else {
            im2col(xs, cin, h, wd, geo, &mut cols);
            &cols
        };
        let dst = &mut out[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        gemm(cout, ckk, ho * wo, w.data(), false, cols_ref, false, dst, false);
    }
    Tensor::new(&[n, cout, ho, wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// gradient back to an input of spatial size `input_hw`.
pub fn conv2d_input_grad(
    gy: &Tensor,
    w: &Tensor,
    geo: ConvGeometry,
    input_hw: (usize, usize),
) -> Tensor {
    let (n, cout, ho, wo) = gy.dims4();
    let (wcout, cin, k, _) = w.dims4();
    assert_eq!(cout, wcout, "conv2d_input_grad: channel mismatch");
    let (h, wd) = input_hw;
    assert_eq!((geo.output_side(h), geo.output_side(wd)), (ho, wo));
    let ckk = cin * k * k;
    let mut out = vec![0.0; n * cin * h * wd];
    let mut cols = vec![0.0; ckk * ho * wo];
    for b in 0..n {
        let g = &gy.data()[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        let dst = &mut out[b * cin * h * wd..(b + 1) * cin * h * wd];
        if is_pointwise(geo) {
            gemm(cin, cout, ho * wo, w.data(), true, g, false, dst, false);
        } else {
            gemm(ckk, cout, ho * wo, w.data(), true, g, false, &mut cols, false);
            col2im(&cols, cin, h, wd, geo, dst);
        }
    }
    Tensor::new(&[n, cin, h, wd], out)
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, geo: ConvGeometry) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (gn, cout, ho, wo) = gy.dims4();
    assert_eq!(n, gn, "conv2d_weight_grad: batch mismatch");
    assert_eq!((geo.output_side(h), geo.output_side(wd)), (ho, wo));
    let k = geo.kernel;
    let ckk = cin * k * k;
    let mut out = vec![0.0; cout * ckk];
    let mut cols = if is_pointwise(geo) {
        Vec::new()
    } else {
        vec![0.0; ckk * ho * wo]
    };
    for b in 0..n {
        let xs = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        let cols_ref: &[f64] = if is_pointwise(geo) {
            xs
        } else {
            im2col(xs, cin, h, wd, geo, &mut cols);
            &cols
        };
        let g = &gy.data()[b * cout * ho * wo..(b + 1) * cout * ho * wo];
        gemm(cout, ho * wo, ckk, g, false, cols_ref, true, &mut out, true);
    }
    Tensor::new(&[cout, cin, k, k], out)
}

/// Adds `b[c]` to every element of channel `c`.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(b.shape(), &[c], "bias shape mismatch");
    let mut out = x.clone();
    let plane = h * w;
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let bias = b.data()[i % c];
        chunk.iter_mut().for_each(|v| *v += bias);
    }
    debug_assert_eq!(out.numel(), n * c * plane);
    out
}

/// Sums over batch and space, leaving one value per channel.
pub fn channel_sum(x: &Tensor) -> Tensor {
    let (_, c, h, w) = x.dims4();
    let mut out = vec![0.0; c];
    for (i, chunk) in x.data().chunks(h * w).enumerate() {
        out[i % c] += chunk.iter().sum::<f64>();
    }
    Tensor::new(&[c], out)
}

/// Broadcasts a `[c]` vector over a `[n, c, h, w]` shape.
pub fn broadcast_channel(b: &Tensor, shape: &[usize]) -> Tensor {
    add_channel_bias(&Tensor::zeros(shape), b)
}

/// 2×2 stride-2 max pooling. Returns the pooled tensor and, for every output
/// element, the flat input index of the selected maximum (first on ties).
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even sides, got {h}×{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[j] > data[best] {
                        best = j;
                    }
                }
                out.push(data[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::new(&[n, c, ho, wo], out), idx)
}

pub fn gather(x: &Tensor, idx: &[usize], out_shape: &[usize]) -> Tensor {
    Tensor::new(out_shape, idx.iter().map(|&j| x.data()[j]).collect())
}

pub fn scatter(g: &Tensor, idx: &[usize], out_shape: &[usize]) -> Tensor {
    assert_eq!(g.numel(), idx.len(), "scatter: index count mismatch");
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    for (&j, &v) in idx.iter().zip(g.data()) {
        dst[j] += v;
    }
    out
}

/// Per output coordinate: the two source taps and their weights for 2×
/// bilinear upsampling with half-pixel centres.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// 2× bilinear upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    let mut rows = vec![0.0; h * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                rows[y * wo + ox] = w0 * src[y * w + i0] + w1 * src[y * w + i1];
            }
        }
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..wo {
                dst[oy * wo + ox] = w0 * rows[i0 * wo + ox] + w1 * rows[i1 * wo + ox];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Adjoint of [`upsample2`]: maps a `2h × 2w` gradient back to `h × w`.
pub fn upsample2_adjoint(g: &Tensor) -> Tensor {
    let (n, c, ho, wo) = g.dims4();
    assert!(ho % 2 == 0 && wo % 2 == 0, "upsample2_adjoint needs even sides");
    let (h, w) = (ho / 2, wo / 2);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = vec![0.0; n * c * h * w];
    let mut rows = vec![0.0; h * wo];
    for plane in 0..n * c {
        let src = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
        rows.fill(0.0);
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..wo {
                let v = src[oy * wo + ox];
                rows[i0 * wo + ox] += w0 * v;
                rows[i1 * wo + ox] += w1 * v;
            }
        }
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                let v = rows[y * wo + ox];
                dst[y * w + i0] += w0 * v;
                dst[y * w + i1] += w1 * v;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: shape mismatch");
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(start + len <= c, "slice_channels out of range");
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for i in 0..n {
        let base = (i * c + start) * plane;
        out.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Tensor::new(&[n, len, h, w], out)
}

/// Embeds `x` at channel offset `start` of a zero tensor with `total` channels.
pub fn pad_channels(x: &Tensor, start: usize, total: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(start + c <= total, "pad_channels out of range");
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, total, h, w]);
    for i in 0..n {
        let dst = (i * total + start) * plane;
        out.data_mut()[dst..dst + c * plane]
            .copy_from_slice(&x.data()[i * c * plane..(i + 1) * c * plane]);
    }
    out
}

/// Log-softmax across the channel axis at every pixel.
pub fn log_softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (i * c + ch) * plane + p;
            let max = (0..c).map(|ch| data[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ch| (data[at(ch)] - max).exp()).sum::<f64>().ln();
            for ch in 0..c {
                data[at(ch)] -= lse;
            }
        }
    }
    out
}

/// Sums across channels at every pixel and broadcasts the sum back to every
/// channel. The map is self-adjoint.
pub fn channel_sum_keep(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let mut acc = vec![0.0; plane];
        for ch in 0..c {
            let src = &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
        }
        for ch in 0..c {
            out.data_mut()[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .copy_from_slice(&acc);
        }
    }
    out
}
