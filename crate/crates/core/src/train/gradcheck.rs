//! Central finite-difference checks of the analytic gradients, in f64.
//!
//! Each case reduces its output to a scalar with a fixed random projection,
//! back-propagates once, and compares a sample of gradient coordinates per
//! input or parameter tensor against `(L(θ + h) − L(θ − h)) / 2h`. The error
//! of a tensor is `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, 1e-3)`
//! over the sampled coordinates.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{CrossAttention, Former};
use crate::blocks::{DmfBlock, DyMobile, Grn, Irffn};
use crate::dyconv::{DyConvOptions, DyResConv, KernelAttention, ScoreMode, StaticInit};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Ctx, Init, Module, StateKind, Visitor, VisitorMut};
use crate::tensor::ops::{self, Activation};
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-4;
/// Groups whose true gradient vanishes (a per-channel shift followed by
/// batch norm, say) carry only roundoff; below this norm the error is absolute.
const NORM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Primitive,
    Block,
    Model,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Primitive => "primitive",
            Scope::Block => "block",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitive" => Ok(Scope::Primitive),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            _ => Err(Error::config(format!("unknown gradcheck scope `{s}` (primitive, block, model)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub scope: Scope,
    /// Op or module under test.
    pub case: String,
    /// Input or parameter tensor.
    pub tensor: String,
    pub rel_err: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradEntry> {
        self.entries.iter().filter(|e| e.rel_err >= self.tolerance).collect()
    }

    /// Cases covered, in order of first appearance.
    pub fn cases(&self, scope: Scope) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in self.entries.iter().filter(|e| e.scope == scope) {
            if !out.contains(&e.case.as_str()) {
                out.push(&e.case);
            }
        }
        out
    }

    /// One line per case with its worst tensor.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for scope in [Scope::Primitive, Scope::Block, Scope::Model] {
            for case in self.cases(scope) {
                let worst = self
                    .entries
                    .iter()
                    .filter(|e| e.scope == scope && e.case == case)
                    .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
                    .expect("case has entries");
                let status = if worst.rel_err < self.tolerance { "ok  " } else { "FAIL" };
                out += &format!(
                    "{status} {:<9} {:<22} max rel err {:.2e} ({})\n",
                    scope.to_string(),
                    case,
                    worst.rel_err,
                    worst.tensor
                );
            }
        }
        out += &format!(
            "{} tensors checked, max rel err {:.2e}, tolerance {:.0e}: {}\n",
            self.entries.len(),
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

struct NoParams;

impl Module<f64> for NoParams {
    fn visit(&self, _: &str, _: &mut Visitor<'_, f64>) {}
    fn visit_mut(&mut self, _: &str, _: &mut VisitorMut<'_, f64>) {}
}

type Forward<'a, M> = dyn Fn(&M, &[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;

/// Checker state shared by all cases of one run.
pub struct Checker {
    pub scope: Scope,
    pub samples: usize,
    rng: ChaCha8Rng,
    pub entries: Vec<GradEntry>,
}

impl Checker {
    pub fn new(scope: Scope, samples: usize, seed: u64) -> Self {
        Checker {
            scope,
            samples,
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: Vec::new(),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(data, shape).expect("shape")
    }

    /// Checks a function of plain tensors.
    pub fn check_fn(
        &mut self,
        case: &str,
        inputs: &[Tensor<f64>],
        f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    ) -> Result<()> {
        self.check_module(case, &mut NoParams, inputs, &|_, xs| f(xs))
    }

    /// Checks the gradients of every input and every parameter of `module`.
    pub fn check_module<M: Module<f64>>(
        &mut self,
        case: &str,
        module: &mut M,
        inputs: &[Tensor<f64>],
        f: &Forward<'_, M>,
    ) -> Result<()> {
        module.visit_mut("", &mut |_, t, k| {
            if k == StateKind::Param {
                *t = t.detach().into_leaf(true);
            }
        });
        let inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().into_leaf(true)).collect();
        let out = f(module, &inputs)?;
        let proj = self.uniform(out.shape(), -1.0, 1.0);
        ops::sum(&ops::mul(&out, &proj)?)?.backward()?;
        let objective = |m: &M, xs: &[Tensor<f64>]| -> Result<f64> {
            no_grad(|| {
                let o = f(m, xs)?;
                Ok(o.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
            })
        };

        for i in 0..inputs.len() {
            let analytic = grad_or_zero(&inputs[i]);
            let coords = self.coords(inputs[i].numel());
            let mut numeric = Vec::with_capacity(coords.len());
            for &j in &coords {
                let mut xs = inputs.clone();
                let mut eval = |delta: f64| -> Result<f64> {
                    xs[i] = nudged(&inputs[i], j, delta);
                    objective(module, &xs)
                };
                numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
            }
            self.record(case, format!("input{i}"), &analytic, &coords, &numeric);
        }

        let params: Vec<(String, Tensor<f64>)> = module
            .named_state()
            .into_iter()
            .filter(|(_, _, k)| *k == StateKind::Param)
            .map(|(n, t, _)| (n, t))
            .collect();
        for (name, original) in &params {
            let analytic = grad_or_zero(original);
            let coords = self.coords(original.numel());
            let mut numeric = Vec::with_capacity(coords.len());
            for &j in &coords {
                let mut values = [0.0; 2];
                for (slot, delta) in values.iter_mut().zip([STEP, -STEP]) {
                    set_param(module, name, nudged(original, j, delta));
                    *slot = objective(module, &inputs)?;
                }
                numeric.push((values[0] - values[1]) / (2.0 * STEP));
            }
            set_param(module, name, original.clone());
            self.record(case, name.clone(), &analytic, &coords, &numeric);
        }
        Ok(())
    }

    fn coords(&mut self, n: usize) -> Vec<usize> {
        if n <= self.samples {
            (0..n).collect()
        } else {
            let mut c = sample(&mut self.rng, n, self.samples).into_vec();
            c.sort_unstable();
            c
        }
    }

    fn record(&mut self, case: &str, tensor: String, analytic: &[f64], coords: &[usize], numeric: &[f64]) {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (&j, &n) in coords.iter().zip(numeric) {
            diff += (analytic[j] - n).powi(2);
            na += analytic[j].powi(2);
            nn += n.powi(2);
        }
        let rel_err = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(NORM_FLOOR);
        self.entries.push(GradEntry {
            scope: self.scope,
            case: case.into(),
            tensor,
            rel_err,
            coords: coords.len(),
        });
    }

    /// Adds uniform noise to every parameter so that zero-initialized paths
    /// (static kernels, GRN affine) carry gradient.
    pub fn jitter_params<M: Module<f64>>(&mut self, module: &mut M, amount: f64) {
        let rng = &mut self.rng;
        module.visit_mut("", &mut |_, t, k| {
            if k == StateKind::Param {
                let data = t.data().iter().map(|v| v + rng.gen_range(-amount..amount)).collect();
                *t = Tensor::from_vec(data, t.shape()).expect("shape");
            }
        });
    }
}

fn grad_or_zero(t: &Tensor<f64>) -> Vec<f64> {
    t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
}

fn nudged(t: &Tensor<f64>, j: usize, delta: f64) -> Tensor<f64> {
    let mut d = t.to_vec();
    d[j] += delta;
    Tensor::from_vec(d, t.shape()).expect("shape")
}

fn set_param<M: Module<f64>>(module: &mut M, name: &str, value: Tensor<f64>) {
    let mut value = Some(value);
    module.visit_mut("", &mut |n, t, _| {
        if n == name {
            *t = value.take().expect("unique name");
        }
    });
}

/// Runs the checks of `scope` and collects one entry per tensor.
pub fn run_gradcheck(scope: Scope, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let mut c = Checker::new(scope, 6, seed);
    match scope {
        Scope::Primitive => primitives(&mut c)?,
        Scope::Block => blocks(&mut c)?,
        Scope::Model => model(&mut c)?,
    }
    Ok(GradcheckReport {
        tolerance,
        entries: c.entries,
    })
}

fn primitives(c: &mut Checker) -> Result<()> {
    let a = c.uniform(&[2, 3, 4], -1.0, 1.0);
    let b = c.uniform(&[3, 1], -1.0, 1.0);
    let pos = c.uniform(&[3, 1], 0.5, 1.5);
    c.check_fn("add", &[a.clone(), b.clone()], |x| ops::add(&x[0], &x[1]))?;
    c.check_fn("sub", &[a.clone(), b.clone()], |x| ops::sub(&x[0], &x[1]))?;
    c.check_fn("mul", &[a.clone(), b.clone()], |x| ops::mul(&x[0], &x[1]))?;
    c.check_fn("div", &[a.clone(), pos], |x| ops::div(&x[0], &x[1]))?;
    c.check_fn("scale", &[a.clone()], |x| ops::scale(&x[0], -1.7))?;
    c.check_fn("add_scalar", &[a.clone()], |x| ops::add_scalar(&x[0], 0.3))?;
    let wide = c.uniform(&[2, 3, 4], -4.0, 4.0);
    for act in [Activation::Gelu, Activation::Relu, Activation::Sigmoid, Activation::HardSwish] {
        c.check_fn(act.name(), &[wide.clone()], move |x| ops::activation(&x[0], act))?;
    }
    c.check_fn("reshape", &[a.clone()], |x| ops::reshape(&x[0], &[4, 6]))?;
    c.check_fn("permute", &[a.clone()], |x| ops::permute(&x[0], &[2, 0, 1]))?;
    let a2 = c.uniform(&[2, 2, 4], -1.0, 1.0);
    c.check_fn("concat", &[a.clone(), a2], |x| ops::concat(&[x[0].clone(), x[1].clone()], 1))?;
    c.check_fn("narrow", &[a.clone()], |x| ops::narrow(&x[0], 2, 1, 2))?;
    c.check_fn("broadcast_to", &[b.clone()], |x| ops::broadcast_to(&x[0], &[2, 3, 4]))?;
    c.check_fn("sum", &[a.clone()], |x| ops::sum(&x[0]))?;
    c.check_fn("mean", &[a.clone()], |x| ops::mean(&x[0]))?;
    let img = c.uniform(&[2, 4, 5, 5], -1.0, 1.0);
    c.check_fn("global_avg_pool", &[img.clone()], |x| ops::global_avg_pool(&x[0]))?;
    let m1 = c.uniform(&[2, 3, 4, 5], -1.0, 1.0);
    let m2 = c.uniform(&[2, 3, 5, 2], -1.0, 1.0);
    c.check_fn("matmul", &[m1, m2], |x| ops::matmul(&x[0], &x[1]))?;
    let xl = c.uniform(&[2, 3, 4], -1.0, 1.0);
    let wl = c.uniform(&[4, 5], -1.0, 1.0);
    let bl = c.uniform(&[5], -1.0, 1.0);
    c.check_fn("linear", &[xl, wl, bl], |x| ops::linear(&x[0], &x[1], Some(&x[2])))?;
    let w = c.uniform(&[6, 4, 3, 3], -0.5, 0.5);
    let bias = c.uniform(&[6], -0.5, 0.5);
    c.check_fn("conv2d", &[img.clone(), w, bias], |x| ops::conv2d(&x[0], &x[1], Some(&x[2]), 1, 1, 1))?;
    let wg = c.uniform(&[6, 2, 3, 3], -0.5, 0.5);
    c.check_fn("conv2d_grouped_s2", &[img.clone(), wg], |x| ops::conv2d(&x[0], &x[1], None, 2, 1, 2))?;
    let wd = c.uniform(&[4, 1, 3, 3], -0.5, 0.5);
    c.check_fn("conv2d_depthwise", &[img.clone(), wd], |x| ops::conv2d(&x[0], &x[1], None, 1, 1, 4))?;
    let wp = c.uniform(&[3, 4, 1, 1], -0.5, 0.5);
    c.check_fn("conv2d_pointwise", &[img.clone(), wp], |x| ops::conv2d(&x[0], &x[1], None, 1, 0, 1))?;
    let g = c.uniform(&[4], 0.5, 1.5);
    let be = c.uniform(&[4], -0.5, 0.5);
    c.check_fn("batch_norm_train", &[img.clone(), g.clone(), be.clone()], |x| {
        Ok(ops::batch_norm_train(&x[0], &x[1], &x[2], 1e-5)?.0)
    })?;
    let rm = c.uniform(&[4], -0.5, 0.5).to_vec();
    let rv = c.uniform(&[4], 0.5, 1.5).to_vec();
    c.check_fn("batch_norm_eval", &[img.clone(), g.clone(), be.clone()], move |x| {
        ops::batch_norm_eval(&x[0], &x[1], &x[2], &rm, &rv, 1e-5)
    })?;
    let ln_g = c.uniform(&[4], 0.5, 1.5);
    let ln_b = c.uniform(&[4], -0.5, 0.5);
    c.check_fn("layer_norm", &[a.clone(), ln_g, ln_b], |x| ops::layer_norm(&x[0], &x[1], &x[2], 1e-5))?;
    c.check_fn("grn", &[img, g, be], |x| ops::grn(&x[0], &x[1], &x[2], 1e-6))?;
    c.check_fn("softmax", &[a.clone()], |x| ops::softmax(&x[0], 2))?;
    let logits = c.uniform(&[4, 5], -2.0, 2.0);
    c.check_fn("cross_entropy", &[logits.clone()], |x| ops::cross_entropy(&x[0], &[0, 3, 1, 4], 0.0))?;
    c.check_fn("cross_entropy_smooth", &[logits], |x| ops::cross_entropy(&x[0], &[2, 2, 0, 1], 0.1))?;
    Ok(())
}

fn random_kernels(kernels: usize, mode: ScoreMode) -> DyConvOptions {
    DyConvOptions {
        kernels,
        score_mode: mode,
        static_init: StaticInit::Random,
        ..Default::default()
    }
}

fn blocks(c: &mut Checker) -> Result<()> {
    let mut init = Init::new(11);
    let (b, d) = (2, 8);
    let x = c.uniform(&[b, 8, 5, 5], -1.0, 1.0);
    let z1 = c.uniform(&[b, d], -1.0, 1.0);
    let z = c.uniform(&[b, 3, d], -1.0, 1.0);
    let tau = 2.0;

    for (case, mode, groups) in [
        ("dyres_conv_sigmoid", ScoreMode::Sigmoid, 1),
        ("dyres_conv_softmax_g2", ScoreMode::Softmax, 2),
    ] {
        let mut conv = DyResConv::new(&mut init, 8, 6, 3, 1, groups, d, &random_kernels(3, mode), true)?;
        c.jitter_params(&mut conv, 0.1);
        c.check_module(case, &mut conv, &[x.clone(), z1.clone()], &move |m, xs| m.forward(&xs[0], &xs[1], tau))?;
    }

    let mut attn = KernelAttention::new(&mut init, 8 + d, &random_kernels(4, ScoreMode::Sigmoid));
    c.jitter_params(&mut attn, 0.1);
    let pooled = c.uniform(&[b, 8], -1.0, 1.0);
    c.check_module("kernel_attention", &mut attn, &[pooled, z1.clone()], &move |m, xs| {
        m.scores(&xs[0], Some(&xs[1]), tau)
    })?;

    let mut cross = CrossAttention::new(&mut init, d, 8, 2)?;
    c.jitter_params(&mut cross, 0.1);
    c.check_module("cross_attention", &mut cross, &[z.clone(), x.clone()], &|m, xs| m.forward(&xs[0], &xs[1]))?;

    let mut former = Former::new(&mut init, d, 2)?;
    c.jitter_params(&mut former, 0.1);
    c.check_module("former", &mut former, &[z.clone()], &|m, xs| m.forward(&xs[0]))?;

    let opts = random_kernels(2, ScoreMode::Sigmoid);
    let mut mobile = DyMobile::new(&mut init, 8, 8, 2, 2, 1, d, Some(&opts), 0.0)?;
    c.jitter_params(&mut mobile, 0.1);
    c.check_module("dy_mobile", &mut mobile, &[x.clone(), z1.clone()], &move |m, xs| {
        m.forward(&xs[0], &xs[1], &mut Ctx::train(tau, 0))
    })?;

    let mut mobile_s2 = DyMobile::new(&mut init, 8, 12, 2, 4, 2, d, Some(&opts), 0.0)?;
    c.jitter_params(&mut mobile_s2, 0.1);
    c.check_module("dy_mobile_stride2", &mut mobile_s2, &[x.clone(), z1.clone()], &move |m, xs| {
        m.forward(&xs[0], &xs[1], &mut Ctx::train(tau, 0))
    })?;

    let mut irffn = Irffn::new(&mut init, 8, 2, 0.0);
    c.jitter_params(&mut irffn, 0.1);
    c.check_module("irffn", &mut irffn, &[x.clone()], &|m, xs| m.forward(&xs[0], &mut Ctx::train(1.0, 0)))?;

    let mut grn = Grn::new(&mut init, 8);
    c.jitter_params(&mut grn, 0.5);
    c.check_module("grn", &mut grn, &[x.clone()], &|m, xs| m.forward(&xs[0]))?;

    let spec = crate::blocks::BlockSpec {
        channels: 8,
        expansion: 2,
        irffn_expansion: 2,
        groups: 2,
        token_dim: d,
        heads: 2,
        drop_path: 0.0,
    };
    let mut block = DmfBlock::new(&mut init, &spec, Some(&opts))?;
    c.jitter_params(&mut block, 0.1);
    c.check_module("dmf_block", &mut block, &[x, z], &move |m, xs| {
        let (x, z) = m.forward(&xs[0], &xs[1], &mut Ctx::train(tau, 0))?;
        ops::concat(&[ops::reshape(&x, &[x.numel()])?, ops::reshape(&z, &[z.numel()])?], 0)
    })?;
    Ok(())
}

fn model(c: &mut Checker) -> Result<()> {
    let mut model = Model::<f64>::new(ModelConfig::micro())?;
    c.jitter_params(&mut model, 0.1);
    let x = c.uniform(&[2, 3, 32, 32], -1.0, 1.0);
    c.check_module("micro_model", &mut model, &[x], &|m, xs| {
        let logits = m.forward(&xs[0], &mut Ctx::train(3.0, 0))?;
        ops::cross_entropy(&logits, &[1, 7], 0.0)
    })
}
