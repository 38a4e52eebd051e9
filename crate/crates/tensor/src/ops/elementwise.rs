use std::f64::consts::FRAC_1_SQRT_2;

use crate::shape::{broadcast_shape, broadcast_strides, for_each_pair};
use crate::tensor::{BackwardOp, Tensor};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

fn binary_kernel(a: &Tensor, b: &Tensor, op: Binary) -> (Vec<f64>, Vec<usize>) {
    let (da, db) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let v = da.iter().zip(db).map(|(&x, &y)| op.apply(x, y)).collect();
        return (v, a.shape().to_vec());
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("{op:?}: shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
    if b.numel() == 1 && out == a.shape() {
        let y = db[0];
        return (da.iter().map(|&x| op.apply(x, y)).collect(), out);
    }
    if a.numel() == 1 && out == b.shape() {
        let x = da[0];
        return (db.iter().map(|&y| op.apply(x, y)).collect(), out);
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut v = vec![0.0; crate::shape::numel(&out)];
    for_each_pair(&out, &sa, &sb, |o, ia, ib| v[o] = op.apply(da[ia], db[ib]));
    (v, out)
}

struct BinaryBackward(Binary);

impl BackwardOp for BinaryBackward {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let need_a = a.requires_grad();
        let need_b = b.requires_grad();
        let (ga, gb) = match self.0 {
            Binary::Add => (need_a.then(|| g.clone()), need_b.then(|| g.clone())),
            Binary::Sub => (need_a.then(|| g.clone()), need_b.then(|| g.neg())),
            Binary::Mul => (need_a.then(|| g * b), need_b.then(|| g * a)),
            Binary::Div => (
                need_a.then(|| g / b),
                need_b.then(|| (g * a).neg() / (b * b)),
            ),
        };
        vec![ga.map(|t| t.sum_to(a.shape())), gb.map(|t| t.sum_to(b.shape()))]
    }
}

fn binary(a: &Tensor, b: &Tensor, op: Binary) -> Tensor {
    let (data, shape) = binary_kernel(a, b, op);
    Tensor::from_op(data, shape, vec![a.clone(), b.clone()], BinaryBackward(op))
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    AddScalar(f64),
    MulScalar(f64),
    Powf(f64),
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    Sigmoid,
    Abs,
    LeakyRelu(f64),
    NormalCdf,
    SafeRecip,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::AddScalar(c) => x + c,
            Unary::MulScalar(c) => x * c,
            Unary::Powf(p) => {
                if p == 2.0 {
                    x * x
                } else {
                    x.powf(p)
                }
            }
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Abs => x.abs(),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::NormalCdf => 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            Unary::SafeRecip => {
                if x == 0.0 {
                    0.0
                } else {
                    1.0 / x
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::AddScalar(_) => "add_scalar",
            Unary::MulScalar(_) => "mul_scalar",
            Unary::Powf(_) => "powf",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sqrt => "sqrt",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Abs => "abs",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::NormalCdf => "normal_cdf",
            Unary::SafeRecip => "safe_recip",
        }
    }
}

struct UnaryBackward(Unary);

/// Elementwise map with no history; used for piecewise-constant derivatives.
fn constant_map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.data().iter().map(|&v| f(v)).collect(), x.shape())
}

impl BackwardOp for UnaryBackward {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(&self, inputs: &[Tensor], y: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let x = &inputs[0];
        let gx = match self.0 {
            Unary::AddScalar(_) => g.clone(),
            Unary::MulScalar(c) => g.mul_scalar(c),
            Unary::Powf(p) => {
                if p == 2.0 {
                    g * &x.mul_scalar(2.0)
                } else {
                    g * &x.powf(p - 1.0).mul_scalar(p)
                }
            }
            Unary::Exp => g * y,
            Unary::Ln => g / x,
            Unary::Sin => g * &x.cos(),
            Unary::Cos => g * &x.sin().neg(),
            // zero at the origin (subgradient) instead of an infinity
            Unary::Sqrt => g * &y.safe_recip().mul_scalar(0.5),
            Unary::Tanh => g * &(y * y).neg().add_scalar(1.0),
            Unary::Sigmoid => g * &(y * &y.neg().add_scalar(1.0)),
            Unary::Abs => g * &constant_map(x, |v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
            Unary::LeakyRelu(s) => g * &constant_map(x, |v| if v > 0.0 { 1.0 } else { s }),
            Unary::NormalCdf => g * &(x * x).mul_scalar(-0.5).exp().mul_scalar(INV_SQRT_2PI),
            Unary::SafeRecip => {
                let y2 = y * y;
                g * &y2.neg()
            }
        };
        vec![Some(gx)]
    }
}

fn unary(x: &Tensor, op: Unary) -> Tensor {
    let data = x.data().iter().map(|&v| op.apply(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], UnaryBackward(op))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, Binary::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, Unary::AddScalar(c))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, Unary::MulScalar(c))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        unary(self, Unary::Powf(p))
    }

    pub fn square(&self) -> Tensor {
        self.powf(2.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, Unary::Exp)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, Unary::Ln)
    }

    pub fn sin(&self) -> Tensor {
        unary(self, Unary::Sin)
    }

    pub fn cos(&self) -> Tensor {
        unary(self, Unary::Cos)
    }

    /// Square root whose derivative at zero is taken to be zero.
    pub fn sqrt(&self) -> Tensor {
        unary(self, Unary::Sqrt)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, Unary::Sigmoid)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, Unary::Abs)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(self, Unary::LeakyRelu(slope))
    }

    /// Standard normal CDF, `0.5 * (1 + erf(x / sqrt 2))`.
    pub fn normal_cdf(&self) -> Tensor {
        unary(self, Unary::NormalCdf)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        self * &self.normal_cdf()
    }

    /// `1/x`, with `0` mapped to `0`.
    pub fn safe_recip(&self) -> Tensor {
        unary(self, Unary::SafeRecip)
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident) => {
        impl std::ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$method(self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                Tensor::$method(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$method(&self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                Tensor::$method(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);
impl_binop!(Div, div);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}

impl std::ops::Neg for Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(&self)
    }
}
