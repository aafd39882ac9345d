use crate::error::{Error, Result};
use crate::nn::{Module, StateKind};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, Default)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One AdamW update of `p` in place. `step` is 1-based.
///
/// `p ← p − lr·wd·p − lr·m̂ / (√v̂ + eps)` with bias-corrected moments.
pub fn adamw_step<T: Element>(
    p: &mut [T],
    g: &[T],
    state: &mut Moments<T>,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    if state.m.len() != p.len() {
        state.m = vec![T::zero(); p.len()];
        state.v = vec![T::zero(); p.len()];
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one, eps, lr_t) = (T::one(), T::lit(cfg.eps), T::lit(lr));
    let c1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let shrink = if decay { one - T::lit(lr * cfg.weight_decay) } else { one };
    for i in 0..p.len() {
        let m = b1 * state.m[i] + (one - b1) * g[i];
        let v = b2 * state.v[i] + (one - b2) * g[i] * g[i];
        state.m[i] = m;
        state.v[i] = v;
        let update = (m / c1) / ((v / c2).sqrt() + eps);
        p[i] = p[i] * shrink - lr_t * update;
    }
}

/// AdamW over every parameter of a module. Rank-1 parameters (biases and
/// normalization affines) are not decayed.
pub struct AdamW<T: Element> {
    pub config: AdamWConfig,
    pub step: u64,
    state: Vec<Moments<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            state: Vec::new(),
        }
    }

    /// Applies one update from the gradients accumulated on `module`'s
    /// parameters, replacing each with a fresh leaf (which also clears its
    /// gradient). A parameter without a gradient is treated as having a zero
    /// gradient.
    pub fn step(&mut self, module: &mut impl Module<T>, lr: f64) -> Result<()> {
        let mut grads = Vec::new();
        module.visit("", &mut |name, t, kind| {
            if kind == StateKind::Param {
                grads.push((name.to_string(), t.grad()));
            }
        });
        if let Some((name, _)) = grads
            .iter()
            .find(|(_, g)| g.as_ref().is_some_and(|g| g.data().iter().any(|v| !v.is_finite())))
        {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
        self.step += 1;
        if self.state.len() != grads.len() {
            self.state = vec![Moments::default(); grads.len()];
        }
        let (step, cfg) = (self.step, self.config);
        let mut i = 0;
        let state = &mut self.state;
        module.visit_mut("", &mut |_, t, kind| {
            if kind != StateKind::Param {
                return;
            }
            let mut p = t.to_vec();
            let g = match &grads[i].1 {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.len()],
            };
            adamw_step(&mut p, &g, &mut state[i], step, lr, &cfg, t.rank() > 1);
            *t = Tensor::from_vec(p, t.shape()).expect("same shape").into_leaf(true);
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = [1.0f64];
        adamw_step(&mut p, &[1.0], &mut Moments::default(), 1, 0.1, &cfg, true);
        // m̂ = 1, v̂ = 1 → update = 1 / (1 + eps)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point_without_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = [0.3f32, -2.0];
        let mut st = Moments::default();
        for step in 1..=5 {
            adamw_step(&mut p, &[0.0, 0.0], &mut st, step, 0.01, &cfg, true);
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd_p() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = [2.0f64];
        adamw_step(&mut p, &[0.0], &mut Moments::default(), 1, 0.1, &cfg, true);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        struct One<T: Element> {
            w: Tensor<T>,
        }
        crate::nn::impl_module!(One { w });
        let mut m = One::<f32> {
            w: Tensor::param(vec![1.0], &[1]).unwrap(),
        };
        m.w.accumulate_grad(&[f32::NAN]);
        let err = AdamW::new(AdamWConfig::default()).step(&mut m, 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGrad(n) if n == "w"), "{err}");
    }
}
