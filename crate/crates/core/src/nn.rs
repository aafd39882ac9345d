//! Layer plumbing shared by every block: parameter visiting, seeded
//! initialization, the forward context, and the plain (non-dynamic) layers.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    /// Trainable parameter.
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

pub type Visitor<'a, T> = dyn FnMut(&str, &Tensor<T>, StateKind) + 'a;
pub type VisitorMut<'a, T> = dyn FnMut(&str, &mut Tensor<T>, StateKind) + 'a;

/// Anything that owns named tensors.
pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>);

    /// `(name, tensor, kind)` for every owned tensor, in visiting order.
    fn named_state(&self) -> Vec<(String, Tensor<T>, StateKind)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t, k| out.push((n.to_string(), t.clone(), k)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, k| {
            if k == StateKind::Param {
                n += t.numel();
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element> Module<T> for Tensor<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(prefix, self, StateKind::Param)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(prefix, self, StateKind::Param)
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Implements [`Module`] by visiting the listed fields under their own names.
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Element> $crate::nn::Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut $crate::nn::Visitor<'_, T>) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut $crate::nn::VisitorMut<'_, T>) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_module;

/// Seeded source for parameter initialization.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::param(data, shape).expect("shape matches data")
    }

    /// He-style uniform: bound √(6 / fan_in).
    pub fn kaiming<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn zeros<T: Element>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape).into_leaf(true)
    }

    pub fn ones<T: Element>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::ones(shape).into_leaf(true)
    }
}

/// Per-call state threaded through every forward pass.
pub struct Ctx {
    pub training: bool,
    /// Kernel-attention temperature (≥ 1).
    pub tau: f64,
    /// Use running statistics in batch norm even while training.
    pub freeze_bn: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            training: false,
            tau: 1.0,
            freeze_bn: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(tau: f64, seed: u64) -> Self {
        Ctx {
            training: true,
            tau,
            freeze_bn: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}
impl_module!(Linear { weight, bias });

impl<T: Element> Linear<T> {
    pub fn new(init: &mut Init, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            weight: init.kaiming(&[din, dout], din),
            bias: bias.then(|| init.zeros(&[dout])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn din(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn dout(&self) -> usize {
        self.weight.dim(1)
    }
}

/// Ordinary grouped convolution with a static kernel.
pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}
impl_module!(Conv2d { weight, bias });

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        Conv2d {
            weight: init.kaiming(&[cout, cin / groups, kernel, kernel], fan_in),
            bias: bias.then(|| init.zeros(&[cout])),
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups)
    }
}

/// Batch normalization over `[B,C,H,W]` with running statistics.
pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running_mean: Mutex<Tensor<T>>,
    running_var: Mutex<Tensor<T>>,
    pub eps: f64,
    /// Weight of the newest batch in the running average.
    pub momentum: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        BatchNorm2d {
            gamma: init.ones(&[channels]),
            beta: init.zeros(&[channels]),
            running_mean: Mutex::new(Tensor::zeros(&[channels])),
            running_var: Mutex::new(Tensor::ones(&[channels])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn running_mean(&self) -> Tensor<T> {
        self.running_mean.lock().expect("bn lock").clone()
    }

    pub fn running_var(&self) -> Tensor<T> {
        self.running_var.lock().expect("bn lock").clone()
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        if ctx.training && !ctx.freeze_bn {
            let (y, stats) = ops::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
            let m = T::lit(self.momentum);
            let keep = T::one() - m;
            for (slot, batch) in [
                (&self.running_mean, &stats.mean),
                (&self.running_var, &stats.var_unbiased),
            ] {
                let mut slot = slot.lock().expect("bn lock");
                let updated = slot
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(&r, &b)| keep * r + m * b)
                    .collect();
                *slot = Tensor::from_vec(updated, slot.shape())?;
            }
            Ok(y)
        } else {
            let rm = self.running_mean();
            let rv = self.running_var();
            ops::batch_norm_eval(x, &self.gamma, &self.beta, rm.data(), rv.data(), self.eps)
        }
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma, StateKind::Param);
        f(&join(prefix, "beta"), &self.beta, StateKind::Param);
        f(&join(prefix, "running_mean"), &self.running_mean.lock().expect("bn lock"), StateKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var.lock().expect("bn lock"), StateKind::Buffer);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma, StateKind::Param);
        f(&join(prefix, "beta"), &mut self.beta, StateKind::Param);
        f(&join(prefix, "running_mean"), self.running_mean.get_mut().expect("bn lock"), StateKind::Buffer);
        f(&join(prefix, "running_var"), self.running_var.get_mut().expect("bn lock"), StateKind::Buffer);
    }
}

pub struct LayerNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}
impl_module!(LayerNorm { gamma, beta });

impl<T: Element> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, dim: usize) -> Self {
        LayerNorm {
            gamma: init.ones(&[dim]),
            beta: init.zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gamma, &self.beta, Self::EPS)
    }
}

/// Stochastic depth on a residual branch `[B, ...]`: in training each sample's
/// branch is kept with probability `1 - rate` and rescaled by `1 / (1 - rate)`.
pub fn drop_path<T: Element>(branch: &Tensor<T>, rate: f64, ctx: &mut Ctx) -> Result<Tensor<T>> {
    if !ctx.training || rate <= 0.0 {
        return Ok(branch.clone());
    }
    if rate >= 1.0 {
        return Err(crate::Error::config(format!("drop-path rate {rate} must be < 1")));
    }
    let b = branch.dim(0);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<T> = (0..b)
        .map(|_| T::lit(if ctx.rng.gen::<f64>() < rate { 0.0 } else { keep }))
        .collect();
    let mut shape = vec![1; branch.rank()];
    shape[0] = b;
    ops::mul(branch, &Tensor::from_vec(mask, &shape)?)
}

/// Element-wise dropout with inverted scaling.
pub fn dropout<T: Element>(x: &Tensor<T>, rate: f64, ctx: &mut Ctx) -> Result<Tensor<T>> {
    if !ctx.training || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<T> = (0..x.numel())
        .map(|_| T::lit(if ctx.rng.gen::<f64>() < rate { 0.0 } else { keep }))
        .collect();
    ops::mul(x, &Tensor::from_vec(mask, x.shape())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_path_degenerate_cases_are_identity() {
        let x = Tensor::<f32>::from_f64(&[1.0, 2.0, 3.0, 4.0], &[4, 1]).unwrap();
        let mut ctx = Ctx::train(1.0, 3);
        assert!(drop_path(&x, 0.0, &mut ctx).unwrap().bit_eq(&x));
        let mut eval = Ctx::eval();
        assert!(drop_path(&x, 0.5, &mut eval).unwrap().bit_eq(&x));
    }

    #[test]
    fn drop_path_keep_fraction_and_mean() {
        // 10^5 samples of a constant branch at rate 0.1.
        let n = 100_000;
        let x = Tensor::<f64>::ones(&[n, 1]);
        let mut ctx = Ctx::train(1.0, 11);
        let y = drop_path(&x, 0.1, &mut ctx).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((kept - 0.9).abs() <= 0.01, "keep fraction {kept}");
        assert!((mean - 1.0).abs() <= 0.015, "mean {mean}");
    }

    #[test]
    fn batch_norm_running_stats_follow_exponential_average() {
        let mut init = Init::new(0);
        let bn = BatchNorm2d::<f64>::new(&mut init, 2);
        let mut ctx = Ctx::train(1.0, 0);
        let (mut rm, mut rv) = ([0.0f64; 2], [1.0f64; 2]);
        for step in 0..3 {
            let vals: Vec<f64> = (0..2 * 2 * 3).map(|i| ((i * 7 + step * 5) % 11) as f64 - 4.0).collect();
            let x = Tensor::from_f64(&vals, &[2, 2, 3, 1]).unwrap();
            bn.forward(&x, &ctx).unwrap();
            // hand-rolled oracle: channel c = elements with (i / 3) % 2 == c
            for c in 0..2 {
                let xs: Vec<f64> = vals.iter().enumerate().filter(|(i, _)| (i / 3) % 2 == c).map(|(_, &v)| v).collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
                rm[c] = 0.9 * rm[c] + 0.1 * m;
                rv[c] = 0.9 * rv[c] + 0.1 * v;
            }
            ctx.training = true;
        }
        for c in 0..2 {
            assert!((bn.running_mean().data()[c] - rm[c]).abs() < 1e-12);
            assert!((bn.running_var().data()[c] - rv[c]).abs() < 1e-12);
        }
    }
}
