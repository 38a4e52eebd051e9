use crate::shape::{self, broadcast_strides, broadcastable_to, for_each_pair, numel, strides};
use crate::tensor::{BackwardOp, Tensor};

struct Reshape {
    from: Vec<usize>,
}

impl BackwardOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(&self.from))]
    }
}

struct BroadcastTo {
    from: Vec<usize>,
}

impl BackwardOp for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_to(&self.from))]
    }
}

struct SumTo {
    from: Vec<usize>,
}

impl BackwardOp for SumTo {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.broadcast_to(&self.from))]
    }
}

struct Permute {
    inverse: Vec<usize>,
}

impl BackwardOp for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.permute(&self.inverse))]
    }
}

struct Narrow {
    axis: usize,
    start: usize,
    full: usize,
}

impl BackwardOp for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.pad_axis(self.axis, self.start, self.full))]
    }
}

struct PadAxis {
    axis: usize,
    start: usize,
    len: usize,
}

impl BackwardOp for PadAxis {
    fn name(&self) -> &'static str {
        "pad_axis"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(g.narrow(self.axis, self.start, self.len))]
    }
}

struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}

impl BackwardOp for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        let mut grads = Vec::with_capacity(self.sizes.len());
        for (inp, &len) in inputs.iter().zip(&self.sizes) {
            grads.push(inp.requires_grad().then(|| g.narrow(self.axis, start, len)));
            start += len;
        }
        grads
    }
}

/// Copies `len` slices along `axis` between two row-major buffers.
/// `outer` is the product of dims before `axis`, `inner` of dims after it.
#[allow(clippy::too_many_arguments)]
fn copy_axis_block(
    src: &[f64],
    src_axis: usize,
    src_start: usize,
    dst: &mut [f64],
    dst_axis: usize,
    dst_start: usize,
    len: usize,
    outer: usize,
    inner: usize,
) {
    let block = len * inner;
    for o in 0..outer {
        let s = (o * src_axis + src_start) * inner;
        let d = (o * dst_axis + dst_start) * inner;
        dst[d..d + block].copy_from_slice(&src[s..s + block]);
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Tensor {
    /// Reshape without copying. Panics if the element count changes.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape: {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Tensor::from_op_shared(
            self.storage().clone(),
            shape.to_vec(),
            vec![self.clone()],
            Reshape { from: self.shape().to_vec() },
        )
    }

    /// Flatten to one dimension.
    pub fn flatten_all(&self) -> Tensor {
        self.reshape(&[self.numel()])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(
            broadcastable_to(self.shape(), shape),
            "broadcast_to: {:?} -> {:?}",
            self.shape(),
            shape
        );
        let src = self.data();
        let s = broadcast_strides(self.shape(), shape);
        let zero = vec![0; shape.len()];
        let mut v = vec![0.0; numel(shape)];
        for_each_pair(shape, &s, &zero, |o, i, _| v[o] = src[i]);
        Tensor::from_op(v, shape.to_vec(), vec![self.clone()], BroadcastTo { from: self.shape().to_vec() })
    }

    /// Sums over broadcast axes so the result has `shape`; the adjoint of
    /// `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(
            broadcastable_to(shape, self.shape()),
            "sum_to: {:?} cannot be reduced to {:?}",
            self.shape(),
            shape
        );
        let src = self.data();
        let mut v = vec![0.0; numel(shape)];
        if numel(shape) == 1 {
            v[0] = src.iter().sum();
        } else {
            let s = broadcast_strides(shape, self.shape());
            let id = strides(self.shape());
            for_each_pair(self.shape(), &id, &s, |_, i, o| v[o] += src[i]);
        }
        Tensor::from_op(v, shape.to_vec(), vec![self.clone()], SumTo { from: self.shape().to_vec() })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor {
        let n: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_keepdim(axes).mul_scalar(1.0 / n.max(1) as f64)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permute: wrong permutation length");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "permute: invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.dim(p)).collect();
        let in_strides = strides(self.shape());
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zero = vec![0; rank];
        let src = self.data();
        let mut v = vec![0.0; self.numel()];
        for_each_pair(&out_shape, &src_strides, &zero, |o, i, _| v[o] = src[i]);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Tensor::from_op(v, out_shape, vec![self.clone()], Permute { inverse })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let full = self.dim(axis);
        assert!(start + len <= full, "narrow: {start}+{len} exceeds {full}");
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let (outer, inner) = outer_inner(self.shape(), axis);
        let mut v = vec![0.0; numel(&shape)];
        copy_axis_block(self.data(), full, start, &mut v, len, 0, len, outer, inner);
        Tensor::from_op(v, shape, vec![self.clone()], Narrow { axis, start, full })
    }

    /// Embeds this tensor at offset `start` of a zero tensor whose `axis` has
    /// size `full`; the adjoint of `narrow`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let len = self.dim(axis);
        assert!(start + len <= full, "pad_axis: {start}+{len} exceeds {full}");
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let (outer, inner) = outer_inner(self.shape(), axis);
        let mut v = vec![0.0; numel(&shape)];
        copy_axis_block(self.data(), len, 0, &mut v, full, start, len, outer, inner);
        Tensor::from_op(v, shape, vec![self.clone()], PadAxis { axis, start, len })
    }

    /// Concatenation along `axis`. All other dims must agree.
    pub fn concat(tensors: &[&Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty(), "concat of nothing");
        let first = tensors[0].shape();
        for t in tensors {
            assert_eq!(t.rank(), first.len(), "concat: rank mismatch");
            for (d, (&x, &y)) in t.shape().iter().zip(first).enumerate() {
                assert!(d == axis || x == y, "concat: shapes {:?} vs {:?}", t.shape(), first);
            }
        }
        let sizes: Vec<usize> = tensors.iter().map(|t| t.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.to_vec();
        shape[axis] = total;
        let (outer, inner) = outer_inner(first, axis);
        let mut v = vec![0.0; shape::numel(&shape)];
        let mut start = 0;
        for (t, &len) in tensors.iter().zip(&sizes) {
            copy_axis_block(t.data(), len, 0, &mut v, total, start, len, outer, inner);
            start += len;
        }
        Tensor::from_op(
            v,
            shape,
            tensors.iter().map(|&t| t.clone()).collect(),
            Concat { axis, sizes },
        )
    }
}
