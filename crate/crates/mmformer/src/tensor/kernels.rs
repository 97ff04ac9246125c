//! Raw f32 slice kernels behind the tape ops.
//!
//! Every kernel accumulates each output element in a fixed sequential order,
//! and rayon parallelism only ever splits work across *disjoint output
//! regions*, so results are bit-identical for any thread count.

use rayon::prelude::*;

/// Dimensions of a 3-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv3dDims {
    pub n: usize,
    pub cin: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv3dDims {
    pub fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        (extent + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
    }
}

/// Valid output range [lo, hi) along one axis for a given kernel offset, such
/// that `o*stride - pad + koff` stays inside [0, in_extent).
#[inline]
fn out_range(out_extent: usize, in_extent: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    // o*stride + koff >= pad  =>  o >= ceil((pad - koff)/stride)
    let lo = if koff >= pad { 0 } else { (pad - koff + stride - 1) / stride };
    // o*stride + koff - pad <= in_extent-1
    let hi_inc = in_extent + pad;
    let hi = if hi_inc > koff {
        ((hi_inc - 1 - koff) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv3d_forward(input: &[f32], weight: &[f32], bias: &[f32], dims: Conv3dDims, out: &mut [f32]) {
    let Conv3dDims { n: _, cin, d, h, w, cout, k, stride, pad, od, oh, ow } = dims;
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let wk = k * k * k;

    out.par_chunks_mut(out_plane).enumerate().for_each(|(plane_idx, out_p)| {
        let ni = plane_idx / cout;
        let co = plane_idx % cout;
        out_p.fill(bias[co]);
        for ci in 0..cin {
            let in_p = &input[(ni * cin + ci) * in_plane..(ni * cin + ci + 1) * in_plane];
            let w_base = (co * cin + ci) * wk;
            for kd in 0..k {
                let (od_lo, od_hi) = out_range(od, d, stride, pad, kd);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = out_range(oh, h, stride, pad, kh);
                    for kw in 0..k {
                        let wv = weight[w_base + (kd * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = out_range(ow, w, stride, pad, kw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for o_d in od_lo..od_hi {
                            let id = o_d * stride + kd - pad;
                            for o_h in oh_lo..oh_hi {
                                let ih = o_h * stride + kh - pad;
                                let out_row = &mut out_p[(o_d * oh + o_h) * ow + ow_lo..(o_d * oh + o_h) * ow + ow_hi];
                                let in_row_base = (id * h + ih) * w;
                                if stride == 1 {
                                    let iw0 = ow_lo + kw - pad;
                                    let in_row = &in_p[in_row_base + iw0..in_row_base + iw0 + (ow_hi - ow_lo)];
                                    for (o, i) in out_row.iter_mut().zip(in_row) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for (oi, o) in out_row.iter_mut().enumerate() {
                                        let iw = (ow_lo + oi) * stride + kw - pad;
                                        *o += wv * in_p[in_row_base + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv3d_backward_input(grad_out: &[f32], weight: &[f32], dims: Conv3dDims, grad_in: &mut [f32]) {
    let Conv3dDims { n: _, cin, d, h, w, cout, k, stride, pad, od, oh, ow } = dims;
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let wk = k * k * k;

    grad_in.par_chunks_mut(in_plane).enumerate().for_each(|(plane_idx, gin_p)| {
        let ni = plane_idx / cin;
        let ci = plane_idx % cin;
        for co in 0..cout {
            let gout_p = &grad_out[(ni * cout + co) * out_plane..(ni * cout + co + 1) * out_plane];
            let w_base = (co * cin + ci) * wk;
            for kd in 0..k {
                let (od_lo, od_hi) = out_range(od, d, stride, pad, kd);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = out_range(oh, h, stride, pad, kh);
                    for kw in 0..k {
                        let wv = weight[w_base + (kd * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = out_range(ow, w, stride, pad, kw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for o_d in od_lo..od_hi {
                            let id = o_d * stride + kd - pad;
                            for o_h in oh_lo..oh_hi {
                                let ih = o_h * stride + kh - pad;
                                let gout_row = &gout_p[(o_d * oh + o_h) * ow + ow_lo..(o_d * oh + o_h) * ow + ow_hi];
                                let in_row_base = (id * h + ih) * w;
                                if stride == 1 {
                                    let iw0 = ow_lo + kw - pad;
                                    let gin_row = &mut gin_p[in_row_base + iw0..in_row_base + iw0 + (ow_hi - ow_lo)];
                                    for (gi, g) in gin_row.iter_mut().zip(gout_row) {
                                        *gi += wv * g;
                                    }
                                } else {
                                    for (oi, g) in gout_row.iter().enumerate() {
                                        let iw = (ow_lo + oi) * stride + kw - pad;
                                        gin_p[in_row_base + iw] += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv3d_backward_weight(input: &[f32], grad_out: &[f32], dims: Conv3dDims, grad_w: &mut [f32], grad_b: &mut [f32]) {
    let Conv3dDims { n, cin, d, h, w, cout, k, stride, pad, od, oh, ow } = dims;
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let wk = k * k * k;

    grad_w
        .par_chunks_mut(cin * wk)
        .zip(grad_b.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gw_co, gb_co))| {
            for ni in 0..n {
                let gout_p = &grad_out[(ni * cout + co) * out_plane..(ni * cout + co + 1) * out_plane];
                for g in gout_p {
                    *gb_co += g;
                }
                for ci in 0..cin {
                    let in_p = &input[(ni * cin + ci) * in_plane..(ni * cin + ci + 1) * in_plane];
                    for kd in 0..k {
                        let (od_lo, od_hi) = out_range(od, d, stride, pad, kd);
                        for kh in 0..k {
                            let (oh_lo, oh_hi) = out_range(oh, h, stride, pad, kh);
                            for kw in 0..k {
                                let (ow_lo, ow_hi) = out_range(ow, w, stride, pad, kw);
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let mut acc = 0.0f32;
                                for o_d in od_lo..od_hi {
                                    let id = o_d * stride + kd - pad;
                                    for o_h in oh_lo..oh_hi {
                                        let ih = o_h * stride + kh - pad;
                                        let gout_row = &gout_p[(o_d * oh + o_h) * ow + ow_lo..(o_d * oh + o_h) * ow + ow_hi];
                                        let in_row_base = (id * h + ih) * w;
                                        if stride == 1 {
                                            let iw0 = ow_lo + kw - pad;
                                            let in_row = &in_p[in_row_base + iw0..in_row_base + iw0 + (ow_hi - ow_lo)];
                                            for (g, i) in gout_row.iter().zip(in_row) {
                                                acc += g * i;
                                            }
                                        } else {
                                            for (oi, g) in gout_row.iter().enumerate() {
                                                let iw = (ow_lo + oi) * stride + kw - pad;
                                                acc += g * in_p[in_row_base + iw];
                                            }
                                        }
                                    }
                                }
                                gw_co[ci * wk + (kd * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            }
        });
}

/// Dimensions of a transposed 3-D convolution (weight layout `[Cin, Cout, k, k, k]`).
#[derive(Debug, Clone, Copy)]
pub struct TConv3dDims {
    pub n: usize,
    pub cin: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl TConv3dDims {
    pub fn out_extent(extent: usize, k: usize, stride: usize) -> usize {
        (extent - 1) * stride + k
    }
}

pub fn tconv3d_forward(input: &[f32], weight: &[f32], bias: &[f32], dims: TConv3dDims, out: &mut [f32]) {
    let TConv3dDims { n: _, cin, d, h, w, cout, k, stride, od, oh, ow } = dims;
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let wk = k * k * k;

    out.par_chunks_mut(out_plane).enumerate().for_each(|(plane_idx, out_p)| {
        let ni = plane_idx / cout;
        let co = plane_idx % cout;
        out_p.fill(bias[co]);
        for ci in 0..cin {
            let in_p = &input[(ni * cin + ci) * in_plane..(ni * cin + ci + 1) * in_plane];
            let w_base = (ci * cout + co) * wk;
            for o_d in 0..od {
                for kd in 0..k {
                    if o_d < kd || (o_d - kd) % stride != 0 {
                        continue;
                    }
                    let id = (o_d - kd) / stride;
                    if id >= d {
                        continue;
                    }
                    for o_h in 0..oh {
                        for kh in 0..k {
                            if o_h < kh || (o_h - kh) % stride != 0 {
                                continue;
                            }
                            let ih = (o_h - kh) / stride;
                            if ih >= h {
                                continue;
                            }
                            let out_row = &mut out_p[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                            let in_row = &in_p[(id * h + ih) * w..(id * h + ih + 1) * w];
                            for kw in 0..k {
                                let wv = weight[w_base + (kd * k + kh) * k + kw];
                                for (iw, iv) in in_row.iter().enumerate() {
                                    let o_w = iw * stride + kw;
                                    if o_w < ow {
                                        out_row[o_w] += wv * iv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn tconv3d_backward_input(grad_out: &[f32], weight: &[f32], dims: TConv3dDims, grad_in: &mut [f32]) {
    let TConv3dDims { n: _, cin, d, h, w, cout, k, stride, od, oh, ow } = dims;
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let wk = k * k * k;

    grad_in.par_chunks_mut(in_plane).enumerate().for_each(|(plane_idx, gin_p)| {
        let ni = plane_idx / cin;
        let ci = plane_idx % cin;
        for co in 0..cout {
            let gout_p = &grad_out[(ni * cout + co) * out_plane..(ni * cout + co + 1) * out_plane];
            let w_base = (ci * cout + co) * wk;
            for id in 0..d {
                for kd in 0..k {
                    let o_d = id * stride + kd;
                    if o_d >= od {
                        continue;
                    }
                    for ih in 0..h {
                        for kh in 0..k {
                            let o_h = ih * stride + kh;
                            if o_h >= oh {
                                continue;
                            }
                            let gin_row = &mut gin_p[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let gout_row = &gout_p[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                            for kw in 0..k {
                                let wv = weight[w_base + (kd * k + kh) * k + kw];
                                for (iw, gi) in gin_row.iter_mut().enumerate() {
                                    let o_w = iw * stride + kw;
                                    if o_w < ow {
                                        *gi += wv * gout_row[o_w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn tconv3d_backward_weight(input: &[f32], grad_out: &[f32], dims: TConv3dDims, grad_w: &mut [f32], grad_b: &mut [f32]) {
    let TConv3dDims { n, cin, d, h, w, cout, k, stride, od, oh, ow } = dims;
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let wk = k * k * k;

    grad_w.par_chunks_mut(cout * wk).enumerate().for_each(|(ci, gw_ci)| {
        for ni in 0..n {
            let in_p = &input[(ni * cin + ci) * in_plane..(ni * cin + ci + 1) * in_plane];
            for co in 0..cout {
                let gout_p = &grad_out[(ni * cout + co) * out_plane..(ni * cout + co + 1) * out_plane];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = 0.0f32;
                            for id in 0..d {
                                let o_d = id * stride + kd;
                                if o_d >= od {
                                    continue;
                                }
                                for ih in 0..h {
                                    let o_h = ih * stride + kh;
                                    if o_h >= oh {
                                        continue;
                                    }
                                    let in_row = &in_p[(id * h + ih) * w..(id * h + ih + 1) * w];
                                    let gout_row = &gout_p[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                                    for (iw, iv) in in_row.iter().enumerate() {
                                        let o_w = iw * stride + kw;
                                        if o_w < ow {
                                            acc += iv * gout_row[o_w];
                                        }
                                    }
                                }
                            }
                            gw_ci[co * wk + (kd * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
        }
    });
    // Bias gradient: plain per-channel sums, cheap enough sequentially.
    for ni in 0..n {
        for co in 0..cout {
            let gout_p = &grad_out[(ni * cout + co) * out_plane..(ni * cout + co + 1) * out_plane];
            grad_b[co] += gout_p.iter().sum::<f32>();
        }
    }
}

/// Per-chunk mean and reciprocal standard deviation, saved for backward.
pub fn norm_stats(chunk: &[f32], eps: f32) -> (f32, f32) {
    let len = chunk.len() as f32;
    let mean = chunk.iter().sum::<f32>() / len;
    let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / len;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn matmul(a: &[f32], b: &[f32], _m: usize, k: usize, n: usize, out: &mut [f32]) {
    out.par_chunks_mut(n).enumerate().for_each(|(mi, out_row)| {
        out_row.fill(0.0);
        let a_row = &a[mi * k..(mi + 1) * k];
        for (ki, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[ki * n..(ki + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// Like [`matmul`] but accumulates into `out` instead of overwriting.
pub fn matmul_acc(a: &[f32], b: &[f32], _m: usize, k: usize, n: usize, out: &mut [f32]) {
    out.par_chunks_mut(n).enumerate().for_each(|(mi, out_row)| {
        let a_row = &a[mi * k..(mi + 1) * k];
        for (ki, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[ki * n..(ki + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// dA = dC · Bᵀ for C = A·B.
pub fn matmul_backward_a(grad_out: &[f32], b: &[f32], _m: usize, k: usize, n: usize, grad_a: &mut [f32]) {
    grad_a.par_chunks_mut(k).enumerate().for_each(|(mi, ga_row)| {
        let g_row = &grad_out[mi * n..(mi + 1) * n];
        for (ki, ga) in ga_row.iter_mut().enumerate() {
            let b_row = &b[ki * n..(ki + 1) * n];
            let mut acc = 0.0f32;
            for (g, bv) in g_row.iter().zip(b_row) {
                acc += g * bv;
            }
            *ga += acc;
        }
    });
}

/// dB = Aᵀ · dC for C = A·B. Accumulates into `grad_b`.
pub fn matmul_backward_b(a: &[f32], grad_out: &[f32], m: usize, k: usize, n: usize, grad_b: &mut [f32]) {
    grad_b.par_chunks_mut(n).enumerate().for_each(|(ki, gb_row)| {
        for mi in 0..m {
            let av = a[mi * k + ki];
            if av == 0.0 {
                continue;
            }
            let g_row = &grad_out[mi * n..(mi + 1) * n];
            for (gb, g) in gb_row.iter_mut().zip(g_row) {
                *gb += av * g;
            }
        }
    });
}

/// C[b] = A[b] · B[b]ᵀ where A is [bt, m, k] and B is [bt, n, k].
pub fn bmm_nt(a: &[f32], b: &[f32], bt: usize, m: usize, k: usize, n: usize, out: &mut [f32]) {
    for bi in 0..bt {
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let b_b = &b[bi * n * k..(bi + 1) * n * k];
        let out_b = &mut out[bi * m * n..(bi + 1) * m * n];
        out_b.par_chunks_mut(n).enumerate().for_each(|(mi, out_row)| {
            let a_row = &a_b[mi * k..(mi + 1) * k];
            for (nj, o) in out_row.iter_mut().enumerate() {
                let b_row = &b_b[nj * k..(nj + 1) * k];
                let mut acc = 0.0f32;
                for (av, bv) in a_row.iter().zip(b_row) {
                    acc += av * bv;
                }
                *o = acc;
            }
        });
    }
}

/// C[b] = A[b] · B[b] where A is [bt, m, k] and B is [bt, k, n].
pub fn bmm(a: &[f32], b: &[f32], bt: usize, m: usize, k: usize, n: usize, out: &mut [f32]) {
    for bi in 0..bt {
        matmul(
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            m,
            k,
            n,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
}

pub fn softmax_axis(input: &[f32], outer: usize, axis: usize, inner: usize, out: &mut [f32]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis * inner + i;
            let mut max_v = f32::NEG_INFINITY;
            for a in 0..axis {
                max_v = max_v.max(input[base + a * inner]);
            }
            let mut sum = 0.0f32;
            for a in 0..axis {
                let e = (input[base + a * inner] - max_v).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for a in 0..axis {
                out[base + a * inner] *= inv;
            }
        }
    }
}

/// Softmax VJP: ds_i = s_i (g_i - Σ_j g_j s_j) along the reduced axis.
pub fn softmax_backward(out: &[f32], grad_out: &[f32], outer: usize, axis: usize, inner: usize, grad_in: &mut [f32]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis * inner + i;
            let mut dot = 0.0f32;
            for a in 0..axis {
                let idx = base + a * inner;
                dot += grad_out[idx] * out[idx];
            }
            for a in 0..axis {
                let idx = base + a * inner;
                grad_in[idx] += out[idx] * (grad_out[idx] - dot);
            }
        }
    }
}

/// One axis of align-corners=false trilinear sampling: source position,
/// floor index, neighbor index and interpolation weight for `dst`.
#[inline]
pub fn linear_sample(dst: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f32) {
    let scale = in_extent as f32 / out_extent as f32;
    let src = (dst as f32 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (in_extent - 1) as f32);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_extent - 1);
    (i0, i1, src - i0 as f32)
}

pub fn trilinear_forward(
    input: &[f32],
    (d, h, w): (usize, usize, usize),
    (od, oh, ow): (usize, usize, usize),
    out: &mut [f32],
) {
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    out.par_chunks_mut(out_plane).enumerate().for_each(|(plane_idx, out_p)| {
        let in_p = &input[plane_idx * in_plane..(plane_idx + 1) * in_plane];
        for zo in 0..od {
            let (z0, z1, fz) = linear_sample(zo, d, od);
            for yo in 0..oh {
                let (y0, y1, fy) = linear_sample(yo, h, oh);
                for xo in 0..ow {
                    let (x0, x1, fx) = linear_sample(xo, w, ow);
                    let g = |z: usize, y: usize, x: usize| in_p[(z * h + y) * w + x];
                    let c00 = g(z0, y0, x0) * (1.0 - fx) + g(z0, y0, x1) * fx;
                    let c01 = g(z0, y1, x0) * (1.0 - fx) + g(z0, y1, x1) * fx;
                    let c10 = g(z1, y0, x0) * (1.0 - fx) + g(z1, y0, x1) * fx;
                    let c11 = g(z1, y1, x0) * (1.0 - fx) + g(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    out_p[(zo * oh + yo) * ow + xo] = c0 * (1.0 - fz) + c1 * fz;
                }
            }
        }
    });
}

pub fn trilinear_backward(
    grad_out: &[f32],
    (d, h, w): (usize, usize, usize),
    (od, oh, ow): (usize, usize, usize),
    grad_in: &mut [f32],
) {
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    grad_in.par_chunks_mut(in_plane).enumerate().for_each(|(plane_idx, gin_p)| {
        let gout_p = &grad_out[plane_idx * out_plane..(plane_idx + 1) * out_plane];
        for zo in 0..od {
            let (z0, z1, fz) = linear_sample(zo, d, od);
            for yo in 0..oh {
                let (y0, y1, fy) = linear_sample(yo, h, oh);
                for xo in 0..ow {
                    let (x0, x1, fx) = linear_sample(xo, w, ow);
                    let g = gout_p[(zo * oh + yo) * ow + xo];
                    let mut add = |z: usize, y: usize, x: usize, wgt: f32| {
                        gin_p[(z * h + y) * w + x] += g * wgt;
                    };
                    add(z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx));
                    add(z0, y0, x1, (1.0 - fz) * (1.0 - fy) * fx);
                    add(z0, y1, x0, (1.0 - fz) * fy * (1.0 - fx));
                    add(z0, y1, x1, (1.0 - fz) * fy * fx);
                    add(z1, y0, x0, fz * (1.0 - fy) * (1.0 - fx));
                    add(z1, y0, x1, fz * (1.0 - fy) * fx);
                    add(z1, y1, x0, fz * fy * (1.0 - fx));
                    add(z1, y1, x1, fz * fy * fx);
                }
            }
        }
    });
}
