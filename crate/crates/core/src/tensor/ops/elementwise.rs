use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape` aligned to `out` (zero on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Flat source offsets of every element of `out` for an operand of `shape`.
pub(crate) fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = aligned_strides(shape, out);
    let n = numel(out);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            off += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// (∂/∂a, ∂/∂b) scaled by the upstream gradient `g`.
    #[inline]
    fn grads<T: Element>(self, a: T, b: T, g: T) -> (T, T) {
        match self {
            Binary::Add => (g, g),
            Binary::Sub => (g, -g),
            Binary::Mul => (g * b, g * a),
            Binary::Div => (g / b, -g * a / (b * b)),
        }
    }
}

fn binary<T: Element>(kind: Binary, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(
            kind.name(),
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )
    })?;
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect();
        let (ac, bc) = (a.clone(), b.clone());
        return Tensor::from_op(kind.name(), data, out_shape, vec![a.clone(), b.clone()], move |g| {
            let (mut ga, mut gb) = (Vec::with_capacity(g.len()), Vec::with_capacity(g.len()));
            for ((&x, &y), &gv) in ac.data().iter().zip(bc.data()).zip(g) {
                let (u, v) = kind.grads(x, y, gv);
                ga.push(u);
                gb.push(v);
            }
            vec![Some(ga), Some(gb)]
        });
    }
    let ia = broadcast_index(a.shape(), &out_shape);
    let ib = broadcast_index(b.shape(), &out_shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| kind.apply(ad[i], bd[j]))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(kind.name(), data, out_shape, vec![a.clone(), b.clone()], move |g| {
        let (ad, bd) = (ac.data(), bc.data());
        let mut ga = vec![T::zero(); ad.len()];
        let mut gb = vec![T::zero(); bd.len()];
        for ((&i, &j), &gv) in ia.iter().zip(&ib).zip(g) {
            let (u, v) = kind.grads(ad[i], bd[j], gv);
            ga[i] += u;
            gb[j] += v;
        }
        vec![Some(ga), Some(gb)]
    })
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Add, a, b)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Sub, a, b)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Mul, a, b)
}

pub fn div<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(Binary::Div, a, b)
}

pub fn scale<T: Element>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| v * s).collect();
    Tensor::from_op("scale", data, x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![Some(g.iter().map(|&v| v * s).collect())]
    })
}

pub fn add_scalar<T: Element>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| v + s).collect();
    Tensor::from_op("add_scalar", data, x.shape().to_vec(), vec![x.clone()], |g| {
        vec![Some(g.to_vec())]
    })
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// tanh approximation of GELU
    Gelu,
    Relu,
    Sigmoid,
    HardSwish,
}

/// √(2/π), the GELU tanh-approximation constant.
pub const GELU_TANH_COEF: f64 = 0.7978845608028654;
const GELU_CUBIC: f64 = 0.044715;

impl Activation {
    #[inline]
    pub fn eval<T: Element>(self, x: T) -> T {
        let half = T::lit(0.5);
        match self {
            Activation::Gelu => {
                let inner = T::lit(GELU_TANH_COEF) * (x + T::lit(GELU_CUBIC) * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::HardSwish => {
                x * (x + T::lit(3.0)).max(T::zero()).min(T::lit(6.0)) / T::lit(6.0)
            }
        }
    }

    #[inline]
    pub fn derivative<T: Element>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let c = T::lit(GELU_TANH_COEF);
                let k = T::lit(GELU_CUBIC);
                let t = (c * (x + k * x * x * x)).tanh();
                let half = T::lit(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::HardSwish => {
                if x <= T::lit(-3.0) {
                    T::zero()
                } else if x >= T::lit(3.0) {
                    T::one()
                } else {
                    (T::lit(2.0) * x + T::lit(3.0)) / T::lit(6.0)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::HardSwish => "hard_swish",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "hard_swish" | "hardswish" => Ok(Activation::HardSwish),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| kind.eval(v)).collect();
    let xc = x.clone();
    Tensor::from_op(kind.name(), data, x.shape().to_vec(), vec![x.clone()], move |g| {
        let gx = xc
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &gv)| gv * kind.derivative(v))
            .collect();
        vec![Some(gx)]
    })
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    activation(x, Activation::Gelu)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    activation(x, Activation::Relu)
}

pub fn sigmoid_t<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    activation(x, Activation::Sigmoid)
}

pub fn hard_swish<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    activation(x, Activation::HardSwish)
}
