//! 2-D convolution as im2col + GEMM, together with its two adjoints.
//!
//! The three operations are closed under differentiation: the backward rule
//! of each one is expressed with the other two, so convolutions can be
//! differentiated any number of times.

use super::matmul::{gemm, gemm_rsc};
use crate::tensor::{BackwardOp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride > 0, "conv2d: stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Geometry { c, h, w, kh, kw, stride, pad, ho, wo }
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output rows per im2col chunk keep the column buffer near this many values.
const CHUNK_VALUES: usize = 1 << 18;

/// Range of output columns `ox` whose input column `ox * s + j - p` lies in
/// `[0, w)`.
fn valid_cols(g: &Geometry, j: usize) -> (usize, usize) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    let off = j as isize - p;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if g.w as isize - off <= 0 { 0 } else { ((g.w as isize - off) + s - 1) / s };
    let lo = (lo as usize).min(g.wo);
    (lo, (hi as usize).clamp(lo, g.wo))
}

/// Columns of output rows `oy0..oy1` for one sample; `cols` is
/// (C*kh*kw) x ((oy1-oy0)*wo).
fn im2col(x: &[f64], g: &Geometry, oy0: usize, oy1: usize, cols: &mut [f64]) {
    let width = (oy1 - oy0) * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * width;
                let (lo, hi) = valid_cols(g, j);
                for oy in oy0..oy1 {
                    let dst = &mut cols[row + (oy - oy0) * g.wo..row + (oy - oy0 + 1) * g.wo];
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let start = (lo * g.stride + j) - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
fn col2im(cols: &[f64], g: &Geometry, oy0: usize, oy1: usize, x: &mut [f64]) {
    let width = (oy1 - oy0) * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * width;
                let (lo, hi) = valid_cols(g, j);
                if lo == hi {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + (oy - oy0) * g.wo + lo..row + (oy - oy0) * g.wo + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = (lo * g.stride + j) - g.pad;
                    for (d, s) in dst[start..].iter_mut().step_by(g.stride).zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Splits the output rows into chunks whose column matrix stays small.
fn row_chunks(g: &Geometry) -> impl Iterator<Item = (usize, usize)> {
    let per_row = (g.col_rows() * g.wo).max(1);
    let rows = (CHUNK_VALUES / per_row).clamp(1, g.ho.max(1));
    let ho = g.ho;
    (0..ho).step_by(rows).map(move |r| (r, (r + rows).min(ho)))
}

fn conv_forward(x: &Tensor, w: &Tensor, g: &Geometry) -> Vec<f64> {
    let n = x.dim(0);
    let o = w.dim(0);
    let (k, hw) = (g.col_rows(), g.col_cols());
    let sample = g.c * g.h * g.w;
    let mut out = vec![0.0; n * o * hw];
    let mut cols = Vec::new();
    for b in 0..n {
        let xs = &x.data()[b * sample..(b + 1) * sample];
        let dst = &mut out[b * o * hw..(b + 1) * o * hw];
        if g.is_pointwise() {
            gemm(o, k, hw, w.data(), k as isize, 1, xs, hw as isize, 1, dst, 0.0);
            continue;
        }
        for (r0, r1) in row_chunks(g) {
            let width = (r1 - r0) * g.wo;
            cols.resize(k * width, 0.0);
            im2col(xs, g, r0, r1, &mut cols);
            gemm_rsc(o, k, width, w.data(), k as isize, 1, &cols, width as isize, 1, &mut dst[r0 * g.wo..], hw, 0.0);
        }
    }
    out
}

fn conv_input_grad_kernel(gy: &Tensor, w: &Tensor, g: &Geometry) -> Vec<f64> {
    let n = gy.dim(0);
    let o = w.dim(0);
    let (k, hw) = (g.col_rows(), g.col_cols());
    let sample = g.c * g.h * g.w;
    let mut dx = vec![0.0; n * sample];
    let mut cols = Vec::new();
    for b in 0..n {
        let gys = &gy.data()[b * o * hw..(b + 1) * o * hw];
        let dst = &mut dx[b * sample..(b + 1) * sample];
        if g.is_pointwise() {
            gemm(k, o, hw, w.data(), 1, k as isize, gys, hw as isize, 1, dst, 0.0);
            continue;
        }
        for (r0, r1) in row_chunks(g) {
            let width = (r1 - r0) * g.wo;
            cols.resize(k * width, 0.0);
            gemm(k, o, width, w.data(), 1, k as isize, &gys[r0 * g.wo..], hw as isize, 1, &mut cols, 0.0);
            col2im(&cols, g, r0, r1, dst);
        }
    }
    dx
}

fn conv_weight_grad_kernel(x: &Tensor, gy: &Tensor, g: &Geometry) -> Vec<f64> {
    let n = x.dim(0);
    let o = gy.dim(1);
    let (k, hw) = (g.col_rows(), g.col_cols());
    let sample = g.c * g.h * g.w;
    let mut dw = vec![0.0; o * k];
    let mut cols = Vec::new();
    for b in 0..n {
        let xs = &x.data()[b * sample..(b + 1) * sample];
        let gys = &gy.data()[b * o * hw..(b + 1) * o * hw];
        if g.is_pointwise() {
            gemm(o, hw, k, gys, hw as isize, 1, xs, 1, hw as isize, &mut dw, 1.0);
            continue;
        }
        for (r0, r1) in row_chunks(g) {
            let width = (r1 - r0) * g.wo;
            cols.resize(k * width, 0.0);
            im2col(xs, g, r0, r1, &mut cols);
            gemm(o, width, k, &gys[r0 * g.wo..], hw as isize, 1, &cols, 1, width as isize, &mut dw, 1.0);
        }
    }
    dw
}

struct Conv2d {
    stride: usize,
    pad: usize,
}

impl BackwardOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        vec![
            x.requires_grad()
                .then(|| g.conv2d_input_grad(w, self.stride, self.pad, (x.dim(2), x.dim(3)))),
            w.requires_grad()
                .then(|| x.conv2d_weight_grad(g, self.stride, self.pad, (w.dim(2), w.dim(3)))),
        ]
    }
}

struct Conv2dInputGrad {
    stride: usize,
    pad: usize,
}

impl BackwardOp for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, gz: &Tensor) -> Vec<Option<Tensor>> {
        let (gy, w) = (&inputs[0], &inputs[1]);
        vec![
            gy.requires_grad().then(|| gz.conv2d(w, self.stride, self.pad)),
            w.requires_grad()
                .then(|| gz.conv2d_weight_grad(gy, self.stride, self.pad, (w.dim(2), w.dim(3)))),
        ]
    }
}

struct Conv2dWeightGrad {
    stride: usize,
    pad: usize,
}

impl BackwardOp for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, gz: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gy) = (&inputs[0], &inputs[1]);
        vec![
            x.requires_grad()
                .then(|| gy.conv2d_input_grad(gz, self.stride, self.pad, (x.dim(2), x.dim(3)))),
            gy.requires_grad().then(|| x.conv2d(gz, self.stride, self.pad)),
        ]
    }
}

impl Tensor {
    /// Cross-correlation of `self` (N, C, H, W) with `weight` (O, C, kh, kw)
    /// using symmetric zero padding. No bias.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "conv2d: input must be NCHW, got {:?}", self.shape());
        assert_eq!(weight.rank(), 4, "conv2d: weight must be OCkk, got {:?}", weight.shape());
        assert_eq!(
            self.dim(1),
            weight.dim(1),
            "conv2d: input has {} channels, weight expects {}",
            self.dim(1),
            weight.dim(1)
        );
        let g = Geometry::new(self.dim(1), self.dim(2), self.dim(3), weight.dim(2), weight.dim(3), stride, pad);
        let out = conv_forward(self, weight, &g);
        Tensor::from_op(
            out,
            vec![self.dim(0), weight.dim(0), g.ho, g.wo],
            vec![self.clone(), weight.clone()],
            Conv2d { stride, pad },
        )
    }

    /// Gradient of a convolution with respect to its input, given the output
    /// gradient `self` (N, O, Ho, Wo). `input_hw` resolves the ambiguity that
    /// strides introduce.
    pub fn conv2d_input_grad(&self, weight: &Tensor, stride: usize, pad: usize, input_hw: (usize, usize)) -> Tensor {
        let (h, w) = input_hw;
        let c = weight.dim(1);
        let g = Geometry::new(c, h, w, weight.dim(2), weight.dim(3), stride, pad);
        assert_eq!(
            (self.dim(1), self.dim(2), self.dim(3)),
            (weight.dim(0), g.ho, g.wo),
            "conv2d_input_grad: output gradient shape mismatch"
        );
        let dx = conv_input_grad_kernel(self, weight, &g);
        Tensor::from_op(
            dx,
            vec![self.dim(0), c, h, w],
            vec![self.clone(), weight.clone()],
            Conv2dInputGrad { stride, pad },
        )
    }

    /// Gradient of a convolution with respect to its weight, for input `self`
    /// and output gradient `grad_out`.
    pub fn conv2d_weight_grad(&self, grad_out: &Tensor, stride: usize, pad: usize, kernel: (usize, usize)) -> Tensor {
        let (kh, kw) = kernel;
        let g = Geometry::new(self.dim(1), self.dim(2), self.dim(3), kh, kw, stride, pad);
        assert_eq!(
            (grad_out.dim(0), grad_out.dim(2), grad_out.dim(3)),
            (self.dim(0), g.ho, g.wo),
            "conv2d_weight_grad: output gradient shape mismatch"
        );
        let dw = conv_weight_grad_kernel(self, grad_out, &g);
        Tensor::from_op(
            dw,
            vec![grad_out.dim(1), self.dim(1), kh, kw],
            vec![self.clone(), grad_out.clone()],
            Conv2dWeightGrad { stride, pad },
        )
    }
}
