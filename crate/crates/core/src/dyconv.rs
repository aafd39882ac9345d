//! Dynamic residual convolution.
//!
//! The effective kernel of a layer is computed per sample:
//!
//! ```text
//! W(x) = Σ_k π_k(x) · W_static[k]  +  W_agnostic
//! ```
//!
//! where the scores `π(x)` come from a two-layer kernel-attention network fed
//! with the globally pooled input concatenated with the first global token.
//! The static kernels start at zero, so a fresh layer is exactly an ordinary
//! convolution with `W_agnostic`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{impl_module, Conv2d, Init, Linear, Module, Visitor, VisitorMut};
use crate::tensor::ops::{self, conv_out_extent};
use crate::tensor::{Element, Tensor};

/// How kernel-attention logits become aggregation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Independent scores in `[0, 1]`.
    Sigmoid,
    /// Scores on the simplex.
    Softmax,
    /// Every score fixed to 1; the attention network is not built.
    Constant,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Sigmoid => "sigmoid",
            ScoreMode::Softmax => "softmax",
            ScoreMode::Constant => "constant",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(ScoreMode::Sigmoid),
            "softmax" => Ok(ScoreMode::Softmax),
            "constant" => Ok(ScoreMode::Constant),
            other => Err(Error::config(format!("unknown score mode `{other}`"))),
        }
    }
}

/// Initialization of the `K` static kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticInit {
    Zero,
    Random,
}

/// Switches of one dynamic residual convolution; the defaults are the
/// full method (8 zero-initialized kernels, sigmoid scores, token input,
/// residual kernel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DyConvOptions {
    pub kernels: usize,
    pub score_mode: ScoreMode,
    /// Feed the first global token into kernel attention.
    pub token_input: bool,
    /// Add the input-agnostic kernel to the dynamic aggregate.
    pub residual: bool,
    pub static_init: StaticInit,
    /// Width reduction of the attention hidden layer.
    pub reduction: usize,
}

impl Default for DyConvOptions {
    fn default() -> Self {
        DyConvOptions {
            kernels: 8,
            score_mode: ScoreMode::Sigmoid,
            token_input: true,
            residual: true,
            static_init: StaticInit::Zero,
            reduction: 4,
        }
    }
}

impl DyConvOptions {
    pub fn validate(&self) -> Result<()> {
        if self.kernels == 0 {
            return Err(Error::config("dyconv.kernels: kernel count K must be at least 1"));
        }
        if self.reduction == 0 {
            return Err(Error::config("dyconv.reduction: must be at least 1"));
        }
        if !self.residual && self.static_init == StaticInit::Zero {
            return Err(Error::config(
                "dyconv.residual: residual=false with zero-initialized static kernels yields an all-zero kernel",
            ));
        }
        Ok(())
    }

    /// Hidden width of the kernel-attention network for input width `din`.
    pub fn hidden_width(&self, din: usize) -> usize {
        (din / self.reduction).max(4)
    }
}

/// Linear decay of the attention temperature from `tau_start` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub anneal_steps: usize,
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, anneal_steps: usize) -> Result<Self> {
        if !(tau_start >= 1.0) || !tau_start.is_finite() {
            return Err(Error::config(format!("tau_start must be a finite value >= 1, got {tau_start}")));
        }
        Ok(TemperatureSchedule { tau_start, anneal_steps })
    }

    pub fn at(&self, step: usize) -> f64 {
        if step >= self.anneal_steps {
            return 1.0;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.tau_start + (1.0 - self.tau_start) * frac
    }
}

pub fn temperature_at(schedule: &TemperatureSchedule, step: usize) -> f64 {
    schedule.at(step)
}

/// The `K` static kernels, the optional input-agnostic kernel, and a bias.
pub struct KernelSet<T: Element> {
    /// `[K, Cout, Cin/g, kh, kw]`
    pub w_static: Tensor<T>,
    /// `[Cout, Cin/g, kh, kw]`; absent when the residual kernel is disabled.
    pub w_agnostic: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub groups: usize,
}
impl_module!(KernelSet { w_static, w_agnostic, bias });

impl<T: Element> KernelSet<T> {
    pub fn new(
        init: &mut Init,
        shape: [usize; 4],
        groups: usize,
        opts: &DyConvOptions,
        bias: bool,
    ) -> Self {
        let fan_in = shape[1] * shape[2] * shape[3];
        let k = opts.kernels;
        let static_shape = [k, shape[0], shape[1], shape[2], shape[3]];
        let w_static = match opts.static_init {
            StaticInit::Zero => init.zeros(&static_shape),
            StaticInit::Random => init.kaiming(&static_shape, fan_in),
        };
        KernelSet {
            w_static,
            w_agnostic: opts.residual.then(|| init.kaiming(&shape, fan_in)),
            bias: bias.then(|| init.zeros(&[shape[0]])),
            groups,
        }
    }

    pub fn count(&self) -> usize {
        self.w_static.dim(0)
    }

    /// `[Cout, Cin/g, kh, kw]`
    pub fn kernel_shape(&self) -> [usize; 4] {
        let s = self.w_static.shape();
        [s[1], s[2], s[3], s[4]]
    }

    /// Per-sample kernels `[B, Cout, Cin/g, kh, kw]` from scores `[B, K]`.
    pub fn aggregate(&self, scores: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.count();
        if scores.rank() != 2 || scores.dim(1) != k {
            return Err(Error::shape(
                "aggregate_kernel",
                format!("scores {:?} for {k} kernels", scores.shape()),
            ));
        }
        let b = scores.dim(0);
        let ks = self.kernel_shape();
        let p: usize = ks.iter().product();
        let flat = ops::reshape(&self.w_static, &[k, p])?;
        let mut agg = ops::matmul(scores, &flat)?;
        if let Some(wa) = &self.w_agnostic {
            agg = ops::add(&agg, &ops::reshape(wa, &[1, p])?)?;
        }
        ops::reshape(&agg, &[b, ks[0], ks[1], ks[2], ks[3]])
    }
}

pub fn aggregate_kernel<T: Element>(scores: &Tensor<T>, ks: &KernelSet<T>) -> Result<Tensor<T>> {
    ks.aggregate(scores)
}

/// Pooled features (⊕ first token) → affine → ReLU → affine → scores.
pub struct KernelAttention<T: Element> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub mode: ScoreMode,
}
impl_module!(KernelAttention { fc1, fc2 });

impl<T: Element> KernelAttention<T> {
    pub fn new(init: &mut Init, din: usize, opts: &DyConvOptions) -> Self {
        let hidden = opts.hidden_width(din);
        KernelAttention {
            fc1: Linear::new(init, din, hidden, true),
            fc2: Linear::new(init, hidden, opts.kernels, true),
            mode: opts.score_mode,
        }
    }

    pub fn din(&self) -> usize {
        self.fc1.din()
    }

    pub fn kernels(&self) -> usize {
        self.fc2.dout()
    }

    pub fn logits(&self, pooled: &Tensor<T>, first_token: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let feat = match first_token {
            Some(z) => {
                if z.rank() != 2 || z.dim(0) != pooled.dim(0) {
                    return Err(Error::shape(
                        "kernel_attention",
                        format!("token {:?} does not match pooled features {:?}", z.shape(), pooled.shape()),
                    ));
                }
                ops::concat(&[pooled.clone(), z.clone()], 1)?
            }
            None => pooled.clone(),
        };
        if feat.dim(1) != self.din() {
            return Err(Error::shape(
                "kernel_attention",
                format!("attention input width {} but the module expects {}", feat.dim(1), self.din()),
            ));
        }
        let h = ops::relu(&self.fc1.forward(&feat)?)?;
        self.fc2.forward(&h)
    }

    /// Scores `[B, K]` for temperature `tau ≥ 1`.
    pub fn scores(&self, pooled: &Tensor<T>, first_token: Option<&Tensor<T>>, tau: f64) -> Result<Tensor<T>> {
        check_tau(tau)?;
        let logits = ops::scale(&self.logits(pooled, first_token)?, T::lit(1.0 / tau))?;
        scores_from_logits(&logits, self.mode)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 1.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be >= 1, got {tau}")))
    }
}

/// Applies the score activation to already temperature-scaled logits.
pub fn scores_from_logits<T: Element>(logits: &Tensor<T>, mode: ScoreMode) -> Result<Tensor<T>> {
    match mode {
        ScoreMode::Sigmoid => ops::sigmoid(logits),
        ScoreMode::Softmax => ops::softmax(logits, 1),
        ScoreMode::Constant => Ok(Tensor::ones(logits.shape())),
    }
}

pub fn kernel_attention_scores<T: Element>(
    pooled: &Tensor<T>,
    first_token: Option<&Tensor<T>>,
    attn: &KernelAttention<T>,
    tau: f64,
) -> Result<Tensor<T>> {
    attn.scores(pooled, first_token, tau)
}

/// A convolution whose kernel is rebuilt per sample from a [`KernelSet`].
pub struct DyResConv<T: Element> {
    pub kernels: KernelSet<T>,
    pub attn: Option<KernelAttention<T>>,
    pub stride: usize,
    pub padding: usize,
    pub token_input: bool,
}
impl_module!(DyResConv { kernels, attn });

impl<T: Element> DyResConv<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        token_dim: usize,
        opts: &DyConvOptions,
        bias: bool,
    ) -> Result<Self> {
        opts.validate()?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::config(format!(
                "dynamic conv: groups={groups} must divide Cin={cin} and Cout={cout}"
            )));
        }
        let kernels = KernelSet::new(init, [cout, cin / groups, kernel, kernel], groups, opts, bias);
        let din = cin + if opts.token_input { token_dim } else { 0 };
        let attn = (opts.score_mode != ScoreMode::Constant).then(|| KernelAttention::new(init, din, opts));
        Ok(DyResConv {
            kernels,
            attn,
            stride,
            padding: kernel / 2,
            token_input: opts.token_input,
        })
    }

    pub fn cin(&self) -> usize {
        self.kernels.kernel_shape()[1] * self.kernels.groups
    }

    pub fn cout(&self) -> usize {
        self.kernels.kernel_shape()[0]
    }

    /// Scores `[B, K]` for input `x` and first token `z1`.
    pub fn scores(&self, x: &Tensor<T>, z1: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
        let b = x.dim(0);
        match &self.attn {
            None => {
                check_tau(tau)?;
                Ok(Tensor::ones(&[b, self.kernels.count()]))
            }
            Some(attn) => {
                let pooled = ops::global_avg_pool(x)?;
                attn.scores(&pooled, self.token_input.then_some(z1), tau)
            }
        }
    }

    /// Convolves each sample with its own aggregated kernel.
    pub fn forward(&self, x: &Tensor<T>, z1: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
        let &[b, cin, h, w] = x.shape() else {
            return Err(Error::shape("dyres_conv", format!("expected [B,C,H,W], got {:?}", x.shape())));
        };
        if z1.rank() != 2 || z1.dim(0) != b {
            return Err(Error::shape(
                "dyres_conv",
                format!("first token {:?} does not match batch {b}", z1.shape()),
            ));
        }
        if cin != self.cin() {
            return Err(Error::shape("dyres_conv", format!("input has {cin} channels, layer expects {}", self.cin())));
        }
        let scores = self.scores(x, z1, tau)?;
        let kernel = self.kernels.aggregate(&scores)?;
        let [cout, cin_g, kh, kw] = self.kernels.kernel_shape();
        let g = self.kernels.groups;
        // Fold the batch into the group axis: sample b, group i is group b·g + i.
        let xf = ops::reshape(x, &[1, b * cin, h, w])?;
        let kf = ops::reshape(&kernel, &[b * cout, cin_g, kh, kw])?;
        let y = ops::conv2d(&xf, &kf, None, self.stride, self.padding, b * g)?;
        let y = ops::reshape(&y, &[b, cout, y.dim(2), y.dim(3)])?;
        match &self.kernels.bias {
            Some(bias) => ops::add(&y, &ops::reshape(bias, &[1, cout, 1, 1])?),
            None => Ok(y),
        }
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let [_, _, kh, kw] = self.kernels.kernel_shape();
        Some((
            conv_out_extent(h, kh, self.stride, self.padding)?,
            conv_out_extent(w, kw, self.stride, self.padding)?,
        ))
    }
}

/// A convolution slot that is either dynamic or plain, depending on the
/// model configuration.
pub enum ConvUnit<T: Element> {
    Static(Conv2d<T>),
    Dynamic(DyResConv<T>),
}

impl<T: Element> ConvUnit<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        dynamic: Option<&DyConvOptions>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        token_dim: usize,
    ) -> Result<Self> {
        match dynamic {
            Some(opts) => Ok(ConvUnit::Dynamic(DyResConv::new(
                init, cin, cout, kernel, stride, groups, token_dim, opts, false,
            )?)),
            None => Ok(ConvUnit::Static(Conv2d::new(init, cin, cout, kernel, stride, groups, false))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, z1: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
        match self {
            ConvUnit::Static(c) => c.forward(x),
            ConvUnit::Dynamic(d) => d.forward(x, z1, tau),
        }
    }
}

impl<T: Element> Module<T> for ConvUnit<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        match self {
            ConvUnit::Static(c) => c.visit(prefix, f),
            ConvUnit::Dynamic(d) => d.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        match self {
            ConvUnit::Static(c) => c.visit_mut(prefix, f),
            ConvUnit::Dynamic(d) => d.visit_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_boundaries() {
        let s = TemperatureSchedule::new(30.0, 100).unwrap();
        assert_eq!(s.at(0), 30.0);
        assert_eq!(s.at(50), 15.5);
        assert_eq!(s.at(100), 1.0);
        assert_eq!(s.at(10_000), 1.0);
        assert!(TemperatureSchedule::new(0.5, 10).is_err());
    }

    #[test]
    fn zero_logits_give_half_in_sigmoid_mode() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        for tau in [1.0, 3.0, 100.0] {
            let s = scores_from_logits(&ops::scale(&logits, 1.0 / tau).unwrap(), ScoreMode::Sigmoid).unwrap();
            assert!(s.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn tau_below_one_is_rejected() {
        let mut init = Init::new(1);
        let conv = DyResConv::<f32>::new(&mut init, 4, 4, 3, 1, 1, 2, &DyConvOptions::default(), false).unwrap();
        let x = Tensor::zeros(&[1, 4, 5, 5]);
        let z = Tensor::zeros(&[1, 2]);
        assert!(matches!(conv.forward(&x, &z, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let mut init = Init::new(1);
        let conv = DyResConv::<f32>::new(&mut init, 4, 4, 3, 1, 1, 2, &DyConvOptions::default(), false).unwrap();
        let x = Tensor::zeros(&[2, 4, 5, 5]);
        let z = Tensor::zeros(&[3, 2]);
        assert!(conv.forward(&x, &z, 1.0).is_err());
    }

    #[test]
    fn zero_scores_leave_agnostic_kernel() {
        let mut init = Init::new(5);
        let opts = DyConvOptions {
            kernels: 3,
            static_init: StaticInit::Random,
            ..Default::default()
        };
        let ks = KernelSet::<f64>::new(&mut init, [4, 2, 3, 3], 1, &opts, false);
        let agg = ks.aggregate(&Tensor::zeros(&[2, 3])).unwrap();
        let wa = ks.w_agnostic.as_ref().unwrap();
        for b in 0..2 {
            assert_eq!(&agg.data()[b * wa.numel()..(b + 1) * wa.numel()], wa.data());
        }
    }

    #[test]
    fn single_kernel_without_residual_returns_that_kernel() {
        let mut init = Init::new(5);
        let opts = DyConvOptions {
            kernels: 1,
            residual: false,
            static_init: StaticInit::Random,
            ..Default::default()
        };
        let ks = KernelSet::<f32>::new(&mut init, [4, 2, 3, 3], 2, &opts, false);
        let agg = ks.aggregate(&Tensor::ones(&[1, 1])).unwrap();
        assert_eq!(agg.data(), ks.w_static.data());
    }

    #[test]
    fn residual_off_requires_random_static_init() {
        let opts = DyConvOptions {
            residual: false,
            ..Default::default()
        };
        assert!(opts.validate().is_err());
    }
}
