use crate::tensor::{BackwardOp, Tensor};

/// `C = op(A) op(B)` where `op` optionally transposes the last two axes.
struct MatMul {
    ta: bool,
    tb: bool,
}

impl BackwardOp for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (ga, gb) = match (self.ta, self.tb) {
            (false, false) => (
                a.requires_grad().then(|| g.matmul_t(b, false, true)),
                b.requires_grad().then(|| a.matmul_t(g, true, false)),
            ),
            (false, true) => (
                a.requires_grad().then(|| g.matmul_t(b, false, false)),
                b.requires_grad().then(|| g.matmul_t(a, true, false)),
            ),
            (true, false) => (
                a.requires_grad().then(|| b.matmul_t(g, false, true)),
                b.requires_grad().then(|| a.matmul_t(g, false, false)),
            ),
            (true, true) => (
                a.requires_grad().then(|| b.matmul_t(g, true, true)),
                b.requires_grad().then(|| g.matmul_t(a, true, true)),
            ),
        };
        vec![ga, gb]
    }
}

/// Logical (rows, cols) of a stored (r, c) matrix, plus its (row, col) strides.
fn view(r: usize, c: usize, t: bool) -> (usize, usize, isize, isize) {
    if t {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

/// `c[m x n] = a * b + beta * c` for row-major buffers viewed through `view`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    gemm_rsc(m, k, n, a, rsa, csa, b, rsb, csb, c, n, beta)
}

/// Like [`gemm`] with an explicit row stride `rsc >= n` for `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rsc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(rsc >= n && c.len() >= (m - 1) * rsc + n, "gemm: output buffer too small");
    let extent = |r: usize, c: usize, rs: isize, cs: isize| {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * rs as usize + (c - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa) && b.len() >= extent(k, n, rsb, csb), "gemm: input view out of bounds");
    // SAFETY: the asserts above keep every strided view in bounds.
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
            rsc as isize,
            1,
        );
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    ///
    /// Operands are rank 2, or rank 3 with equal batch sizes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (ra, rb) = (self.rank(), other.rank());
        assert!(
            (ra == 2 && rb == 2) || (ra == 3 && rb == 3 && self.dim(0) == other.dim(0)),
            "matmul: unsupported shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let batch = if ra == 3 { self.dim(0) } else { 1 };
        let (ar, ac) = (self.dim(ra - 2), self.dim(ra - 1));
        let (br, bc) = (other.dim(rb - 2), other.dim(rb - 1));
        let (m, k, rsa, csa) = view(ar, ac, ta);
        let (k2, n, rsb, csb) = view(br, bc, tb);
        assert_eq!(
            k,
            k2,
            "matmul: inner dims differ for {:?}{} x {:?}{}",
            self.shape(),
            if ta { "^T" } else { "" },
            other.shape(),
            if tb { "^T" } else { "" }
        );
        let mut out = vec![0.0; batch * m * n];
        let (sa, sb) = (ar * ac, br * bc);
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.data()[bi * sa..(bi + 1) * sa],
                rsa,
                csa,
                &other.data()[bi * sb..(bi + 1) * sb],
                rsb,
                csb,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let shape = if ra == 3 { vec![batch, m, n] } else { vec![m, n] };
        Tensor::from_op(out, shape, vec![self.clone(), other.clone()], MatMul { ta, tb })
    }
}
