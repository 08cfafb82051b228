//! Flat-slice numeric kernels behind the graph ops.
//!
//! Each hot kernel has a `_seq` variant and, with the `parallel` feature, a
//! `_par` variant that splits work across disjoint output slices via rayon.
//! Both variants run the same per-element accumulation loop in the same
//! order, so their outputs are bitwise identical; the un-suffixed dispatcher
//! picks whichever the build enables. The criterion bench suite compares the
//! two variants directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Shapes for one conv2d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

// One output row: out_row[j] = sum_p a_row[p] * b[p][j], p ascending.
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o += av * bv;
        }
    }
}

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    });
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        matmul_par(a, b, m, k, n)
    }
    #[cfg(not(feature = "parallel"))]
    {
        matmul_seq(a, b, m, k, n)
    }
}

// ── conv2d forward ──────────────────────────────────────────────────────

// One output plane. Each cell accumulates bias first, then contributions in
// (ic, kh, kw) ascending order.
fn conv2d_plane(input: &[f64], kernel: &[f64], bias: f64, d: &ConvDims, plane: &mut [f64]) {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    for oh in 0..oh_n {
        for ow in 0..ow_n {
            let mut acc = bias;
            for ic in 0..d.c_in {
                for kh in 0..d.kh {
                    let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for kw in 0..d.kw {
                        let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        let iv = input[(ic * d.h + ih as usize) * d.w + iw as usize];
                        let kv = kernel[(ic * d.kh + kh) * d.kw + kw];
                        acc += iv * kv;
                    }
                }
            }
            plane[oh * ow_n + ow] = acc;
        }
    }
}

pub fn conv2d_forward_seq(input: &[f64], kernels: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane_len = d.out_h() * d.out_w();
    let k_len = d.c_in * d.kh * d.kw;
    let mut out = vec![0.0; d.c_out * plane_len];
    for (oc, plane) in out.chunks_mut(plane_len).enumerate() {
        conv2d_plane(input, &kernels[oc * k_len..(oc + 1) * k_len], bias[oc], d, plane);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn conv2d_forward_par(input: &[f64], kernels: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane_len = d.out_h() * d.out_w();
    let k_len = d.c_in * d.kh * d.kw;
    let mut out = vec![0.0; d.c_out * plane_len];
    out.par_chunks_mut(plane_len).enumerate().for_each(|(oc, plane)| {
        conv2d_plane(input, &kernels[oc * k_len..(oc + 1) * k_len], bias[oc], d, plane);
    });
    out
}

pub fn conv2d_forward(input: &[f64], kernels: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        conv2d_forward_par(input, kernels, bias, d)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv2d_forward_seq(input, kernels, bias, d)
    }
}

// ── conv2d backward ─────────────────────────────────────────────────────

// Gradient w.r.t. one input plane, gathered per input cell so parallel and
// sequential orders agree: contributions accumulate over (oc, kh, kw)
// ascending.
fn conv2d_input_grad_plane(
    kernels: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    ic: usize,
    plane: &mut [f64],
) {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let k_len = d.c_in * d.kh * d.kw;
    for ih in 0..d.h {
        for iw in 0..d.w {
            let mut acc = 0.0;
            for oc in 0..d.c_out {
                for kh in 0..d.kh {
                    let oh_num = ih + d.padding;
                    if oh_num < kh || (oh_num - kh) % d.stride != 0 {
                        continue;
                    }
                    let oh = (oh_num - kh) / d.stride;
                    if oh >= oh_n {
                        continue;
                    }
                    for kw in 0..d.kw {
                        let ow_num = iw + d.padding;
                        if ow_num < kw || (ow_num - kw) % d.stride != 0 {
                            continue;
                        }
                        let ow = (ow_num - kw) / d.stride;
                        if ow >= ow_n {
                            continue;
                        }
                        let g = grad_out[(oc * oh_n + oh) * ow_n + ow];
                        let kv = kernels[oc * k_len + (ic * d.kh + kh) * d.kw + kw];
                        acc += g * kv;
                    }
                }
            }
            plane[ih * d.w + iw] = acc;
        }
    }
}

pub fn conv2d_input_grad_seq(kernels: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane_len = d.h * d.w;
    let mut out = vec![0.0; d.c_in * plane_len];
    for (ic, plane) in out.chunks_mut(plane_len).enumerate() {
        conv2d_input_grad_plane(kernels, grad_out, d, ic, plane);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn conv2d_input_grad_par(kernels: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane_len = d.h * d.w;
    let mut out = vec![0.0; d.c_in * plane_len];
    out.par_chunks_mut(plane_len).enumerate().for_each(|(ic, plane)| {
        conv2d_input_grad_plane(kernels, grad_out, d, ic, plane);
    });
    out
}

pub fn conv2d_input_grad(kernels: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        conv2d_input_grad_par(kernels, grad_out, d)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv2d_input_grad_seq(kernels, grad_out, d)
    }
}

// Gradient w.r.t. one output channel's kernel block, accumulated over
// (oh, ow) ascending per kernel cell.
fn conv2d_kernel_grad_block(
    input: &[f64],
    grad_plane: &[f64],
    d: &ConvDims,
    block: &mut [f64],
) {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    for ic in 0..d.c_in {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let mut acc = 0.0;
                for oh in 0..oh_n {
                    let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for ow in 0..ow_n {
                        let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        let g = grad_plane[oh * ow_n + ow];
                        let iv = input[(ic * d.h + ih as usize) * d.w + iw as usize];
                        acc += g * iv;
                    }
                }
                block[(ic * d.kh + kh) * d.kw + kw] = acc;
            }
        }
    }
}

pub fn conv2d_kernel_grad_seq(input: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let k_len = d.c_in * d.kh * d.kw;
    let plane_len = d.out_h() * d.out_w();
    let mut out = vec![0.0; d.c_out * k_len];
    for (oc, block) in out.chunks_mut(k_len).enumerate() {
        conv2d_kernel_grad_block(input, &grad_out[oc * plane_len..(oc + 1) * plane_len], d, block);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn conv2d_kernel_grad_par(input: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let k_len = d.c_in * d.kh * d.kw;
    let plane_len = d.out_h() * d.out_w();
    let mut out = vec![0.0; d.c_out * k_len];
    out.par_chunks_mut(k_len).enumerate().for_each(|(oc, block)| {
        conv2d_kernel_grad_block(input, &grad_out[oc * plane_len..(oc + 1) * plane_len], d, block);
    });
    out
}

pub fn conv2d_kernel_grad(input: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        conv2d_kernel_grad_par(input, grad_out, d)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv2d_kernel_grad_seq(input, grad_out, d)
    }
}

pub fn conv2d_bias_grad(grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane_len = d.out_h() * d.out_w();
    grad_out
        .chunks(plane_len)
        .map(|plane| plane.iter().sum())
        .collect()
}
