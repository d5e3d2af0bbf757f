//! 2D convolution as im2col plus a matrix product, with the matching
//! backward passes.
//!
//! Activations are `[n][c][h][w]` row-major. The column matrix has one
//! row per output position `(image, oy, ox)` and one column per kernel
//! tap `(ci, dy, dx)`; the weight tensor `[cout][cin][kh][kw]` flattens
//! directly to the `[cout, cin*kh*kw]` matrix the kernels consume.
//! Backward recomputes the column matrix instead of keeping it alive,
//! trading a little compute for a much smaller tape.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul_ab, matmul_abt, matmul_atb};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvDims {
    pub fn infer(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvDims> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d wants [n,c,h,w] and [cout,cin,kh,kw], got {x_shape:?} and {w_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {cin}, weight {wcin}"
            )));
        }
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            hout: conv_out_size(h, kh, stride, pad)?,
            wout: conv_out_size(w, kw, stride, pad)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.n * self.hout * self.wout
    }

    pub fn cols(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Build the column matrix, one row per output position.
pub fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.cols();
    let mut cols = vec![0.0f64; d.rows() * k];
    let rows_per_image = d.hout * d.wout;
    cols.par_chunks_mut(rows_per_image * k)
        .enumerate()
        .for_each(|(img, block)| {
            let x_img = &x[img * d.cin * d.h * d.w..(img + 1) * d.cin * d.h * d.w];
            for oy in 0..d.hout {
                for ox in 0..d.wout {
                    let row = oy * d.wout + ox;
                    let out_row = &mut block[row * k..(row + 1) * k];
                    let iy0 = (oy * d.stride) as i64 - d.pad as i64;
                    let ix0 = (ox * d.stride) as i64 - d.pad as i64;
                    let mut col = 0usize;
                    for ci in 0..d.cin {
                        let plane = &x_img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                        for dy in 0..d.kh {
                            let iy = iy0 + dy as i64;
                            for dx in 0..d.kw {
                                let ix = ix0 + dx as i64;
                                if iy >= 0 && iy < d.h as i64 && ix >= 0 && ix < d.w as i64 {
                                    out_row[col] = plane[iy as usize * d.w + ix as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        });
    cols
}

/// Scatter-add the column matrix back onto the input grid; exact adjoint
/// of [`im2col`]. Images are processed independently, and positions
/// within an image accumulate in a fixed order.
pub fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.cols();
    let mut x = vec![0.0f64; d.n * d.cin * d.h * d.w];
    let rows_per_image = d.hout * d.wout;
    x.par_chunks_mut(d.cin * d.h * d.w)
        .enumerate()
        .for_each(|(img, x_img)| {
            let block = &cols[img * rows_per_image * k..(img + 1) * rows_per_image * k];
            for oy in 0..d.hout {
                for ox in 0..d.wout {
                    let row = oy * d.wout + ox;
                    let in_row = &block[row * k..(row + 1) * k];
                    let iy0 = (oy * d.stride) as i64 - d.pad as i64;
                    let ix0 = (ox * d.stride) as i64 - d.pad as i64;
                    let mut col = 0usize;
                    for ci in 0..d.cin {
                        let base = ci * d.h * d.w;
                        for dy in 0..d.kh {
                            let iy = iy0 + dy as i64;
                            for dx in 0..d.kw {
                                let ix = ix0 + dx as i64;
                                if iy >= 0 && iy < d.h as i64 && ix >= 0 && ix < d.w as i64 {
                                    x_img[base + iy as usize * d.w + ix as usize] += in_row[col];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        });
    x
}

/// Reorder the `[rows, cout]` product into `[n][cout][hout][wout]`.
fn rows_to_nchw(prod: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0f64; d.n * d.cout * d.hout * d.wout];
    let spatial = d.hout * d.wout;
    out.par_chunks_mut(d.cout * spatial)
        .enumerate()
        .for_each(|(img, block)| {
            for s in 0..spatial {
                let src = &prod[(img * spatial + s) * d.cout..(img * spatial + s + 1) * d.cout];
                for (co, &v) in src.iter().enumerate() {
                    block[co * spatial + s] = v;
                }
            }
        });
    out
}

/// Reorder `[n][cout][hout][wout]` into the `[rows, cout]` layout.
fn nchw_to_rows(g: &[f64], d: &ConvDims) -> Vec<f64> {
    let spatial = d.hout * d.wout;
    let mut out = vec![0.0f64; d.rows() * d.cout];
    out.par_chunks_mut(spatial * d.cout)
        .enumerate()
        .for_each(|(img, block)| {
            let src = &g[img * d.cout * spatial..(img + 1) * d.cout * spatial];
            for s in 0..spatial {
                for co in 0..d.cout {
                    block[s * d.cout + co] = src[co * spatial + s];
                }
            }
        });
    out
}

/// Convolution forward pass.
pub fn conv_forward(x: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
    let cols = im2col(x, d);
    let prod = matmul_abt(&cols, d.rows(), d.cols(), weight, d.cout);
    rows_to_nchw(&prod, d)
}

/// Convolution backward pass: gradients w.r.t. input and weight.
pub fn conv_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let grad_rows = nchw_to_rows(grad_out, d);
    let cols = im2col(x, d);
    let grad_w = matmul_atb(&grad_rows, d.rows(), d.cout, &cols, d.cols());
    let grad_cols = matmul_ab(&grad_rows, d.rows(), d.cout, weight, d.cols());
    let grad_x = col2im(&grad_cols, d);
    (grad_x, grad_w)
}
