use crate::tensor::{BackwardOp, Tensor};

struct Upsample2x;

impl BackwardOp for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_pool2x())]
    }
}

struct SumPool2x;

impl BackwardOp for SumPool2x {
    fn name(&self) -> &'static str {
        "sum_pool2x"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.upsample_nearest2x())]
    }
}

struct SoftmaxLast;

impl BackwardOp for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, _inputs: &[Tensor], y: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let last = y.rank() - 1;
        let dot = (g * y).sum_keepdim(&[last]);
        vec![Some(y * &(g - &dot))]
    }
}

impl Tensor {
    /// Nearest-neighbour upsampling by 2 of an NCHW tensor.
    pub fn upsample_nearest2x(&self) -> Tensor {
        assert_eq!(self.rank(), 4, "upsample_nearest2x expects NCHW");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                let row = &s[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut d[y * w2..(y + 1) * w2];
                for (x, v) in drow.iter_mut().enumerate() {
                    *v = row[x / 2];
                }
            }
        }
        Tensor::from_op(out, vec![n, c, h2, w2], vec![self.clone()], Upsample2x)
    }

    /// Sum over non-overlapping 2x2 windows; the adjoint of
    /// `upsample_nearest2x`. Spatial dims must be even.
    pub fn sum_pool2x(&self) -> Tensor {
        assert_eq!(self.rank(), 4, "sum_pool2x expects NCHW");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2x: odd spatial dims {h}x{w}");
        let (h2, w2) = (h / 2, w / 2);
        let src = self.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h {
                let row = &s[y * w..(y + 1) * w];
                let drow = &mut d[(y / 2) * w2..(y / 2 + 1) * w2];
                for (x, &v) in row.iter().enumerate() {
                    drow[x / 2] += v;
                }
            }
        }
        Tensor::from_op(out, vec![n, c, h2, w2], vec![self.clone()], SumPool2x)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape().last().expect("softmax of a scalar");
        let mut out = self.to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], SoftmaxLast)
    }
}
