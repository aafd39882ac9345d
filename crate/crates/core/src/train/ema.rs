use crate::checkpoint::{assign_state, NamedTensors};
use crate::error::Result;
use crate::model::Model;
use crate::nn::Module;
use crate::tensor::{Element, Tensor};

/// `shadow ← momentum·shadow + (1 − momentum)·params`, element-wise.
pub fn ema_update<T: Element>(shadow: &mut [T], params: &[T], momentum: f64) {
    let (m, rest) = (T::lit(momentum), T::lit(1.0 - momentum));
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = m * *s + rest * p;
    }
}

/// Exponential moving average of a model's parameters and batch-norm
/// buffers.
pub struct Ema<T: Element> {
    pub momentum: f64,
    pub shadow: NamedTensors<T>,
}

impl<T: Element> Ema<T> {
    pub fn new(model: &Model<T>, momentum: f64) -> Self {
        Ema {
            momentum,
            shadow: snapshot(model),
        }
    }

    pub fn update(&mut self, model: &Model<T>) {
        for ((_, s), (_, p, _)) in self.shadow.iter_mut().zip(model.named_state()) {
            let mut data = s.to_vec();
            ema_update(&mut data, p.data(), self.momentum);
            *s = Tensor::from_vec(data, s.shape()).expect("same shape");
        }
    }

    /// Relative L2 distance between the shadow and the live parameters.
    pub fn gap(&self, model: &Model<T>) -> f64 {
        let (mut diff, mut norm) = (0.0, 0.0);
        for ((_, s), (_, p, _)) in self.shadow.iter().zip(model.named_state()) {
            for (&a, &b) in s.data().iter().zip(p.data()) {
                diff += (a.as_f64() - b.as_f64()).powi(2);
                norm += b.as_f64().powi(2);
            }
        }
        (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// A model carrying the shadow weights.
    pub fn materialize(&self, model: &Model<T>) -> Result<Model<T>> {
        let mut out = Model::new(model.config.clone())?;
        assign_state(&mut out, &self.shadow)?;
        Ok(out)
    }
}

pub fn snapshot<T: Element>(model: &Model<T>) -> NamedTensors<T> {
    model.named_state().into_iter().map(|(n, t, _)| (n, t.detach())).collect()
}
