//! Model assembly: stem, stages of DMF blocks carrying the global tokens, and
//! the classification head.

mod config;

pub use config::{ModelConfig, StageConfig};

use crate::blocks::{BlockSpec, ClassifierHead, DmfBlock, Downsample, Stem};
use crate::error::{Error, Result};
use crate::nn::{impl_module, Ctx, Init, Module, StateKind};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

pub struct Stage<T: Element> {
    pub downsample: Option<Downsample<T>>,
    pub blocks: Vec<DmfBlock<T>>,
}
impl_module!(Stage { downsample, blocks });

pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub stem: Stem<T>,
    /// Learnable global tokens `[M, d]`, shared by every image.
    pub tokens: Tensor<T>,
    pub stages: Vec<Stage<T>>,
    pub head: ClassifierHead<T>,
}
impl_module!(Model { stem, tokens, stages, head });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Logits,
    /// Stage outputs at strides 4, 8, 16 and 32, for dense-prediction necks.
    Pyramid,
}

pub enum ModelOutput<T: Element> {
    Logits(Tensor<T>),
    Pyramid(Vec<Tensor<T>>),
}

/// Everything the backbone computes before the head.
pub struct Features<T: Element> {
    /// Output of each stage, `[B, C_i, H/s_i, W/s_i]`.
    pub stages: Vec<Tensor<T>>,
    /// Final tokens `[B, M, d]`.
    pub tokens: Tensor<T>,
}

pub fn build_model<T: Element>(cfg: &ModelConfig) -> Result<Model<T>> {
    Model::new(cfg.clone())
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let first = config.stages[0].channels;
        let stem = Stem::new(&mut init, config.in_channels, config.stem_channels, config.lite_multiplier, first);
        let tokens = init.uniform(&[config.tokens, config.token_dim], 1.0);
        let dynamic = config.dynamic_options();
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut width = first;
        for s in &config.stages {
            let downsample = s.downsample.then(|| Downsample::new(&mut init, width, s.channels));
            width = s.channels;
            let spec = BlockSpec {
                channels: s.channels,
                expansion: s.expansion,
                irffn_expansion: s.irffn_expansion,
                groups: s.groups,
                token_dim: config.token_dim,
                heads: config.heads,
                drop_path: config.drop_path,
            };
            let blocks = (0..s.blocks)
                .map(|_| DmfBlock::new(&mut init, &spec, dynamic))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        let head = ClassifierHead::new(
            &mut init,
            width,
            config.token_dim,
            config.head_hidden,
            config.num_classes,
            config.dropout,
        );
        Ok(Model {
            config,
            stem,
            tokens,
            stages,
            head,
        })
    }

    pub fn features(&self, images: &Tensor<T>, ctx: &mut Ctx) -> Result<Features<T>> {
        if images.rank() != 4 || images.dim(1) != self.config.in_channels {
            return Err(Error::shape(
                "model",
                format!("expected images [B,{},H,W], got {:?}", self.config.in_channels, images.shape()),
            ));
        }
        let b = images.dim(0);
        let mut x = self.stem.forward(images, ctx)?;
        let (m, d) = (self.config.tokens, self.config.token_dim);
        let mut z = ops::broadcast_to(&ops::reshape(&self.tokens, &[1, m, d])?, &[b, m, d])?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                x = ds.forward(&x, ctx)?;
            }
            for block in &stage.blocks {
                (x, z) = block.forward(&x, &z, ctx)?;
            }
            outs.push(x.clone());
        }
        Ok(Features { stages: outs, tokens: z })
    }

    /// Class logits `[B, num_classes]`.
    pub fn forward(&self, images: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let f = self.features(images, ctx)?;
        let x = f.stages.last().expect("at least one stage");
        self.head.forward(x, &f.tokens, ctx)
    }

    /// Stage outputs at strides 4, 8, 16, 32. Fails unless the model has
    /// exactly those four stages.
    pub fn pyramid(&self, images: &Tensor<T>, ctx: &mut Ctx) -> Result<Vec<Tensor<T>>> {
        let strides = self.config.stage_strides();
        if strides != [4, 8, 16, 32] {
            return Err(Error::config(format!(
                "pyramid output needs stages at strides 4, 8, 16 and 32; `{}` has strides {strides:?}",
                self.config.name
            )));
        }
        if images.rank() == 4 && (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0) {
            return Err(Error::shape(
                "pyramid",
                format!("input extents {:?} must be divisible by 32", &images.shape()[2..]),
            ));
        }
        Ok(self.features(images, ctx)?.stages)
    }

    pub fn forward_mode(&self, images: &Tensor<T>, mode: ForwardMode, ctx: &mut Ctx) -> Result<ModelOutput<T>> {
        match mode {
            ForwardMode::Logits => self.forward(images, ctx).map(ModelOutput::Logits),
            ForwardMode::Pyramid => self.pyramid(images, ctx).map(ModelOutput::Pyramid),
        }
    }

    /// Trainable parameters in visiting order.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_state()
            .into_iter()
            .filter(|(_, _, k)| *k == StateKind::Param)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    /// Marks every parameter as a fresh gradient-tracking leaf.
    pub fn enable_grad(&mut self) {
        self.visit_mut("", &mut |_, t, k| {
            if k == StateKind::Param {
                *t = t.detach().into_leaf(true);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_logits_shape() {
        let model = Model::<f32>::new(ModelConfig::micro()).unwrap();
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let y = model.forward(&x, &mut Ctx::eval()).unwrap();
        assert_eq!(y.shape(), &[2, model.config.num_classes]);
    }

    #[test]
    fn pyramid_strides() {
        let model = Model::<f32>::new(ModelConfig::tiny()).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let outs = model.pyramid(&x, &mut Ctx::eval()).unwrap();
        let sides: Vec<_> = outs.iter().map(|t| (t.dim(2), t.dim(3))).collect();
        assert_eq!(sides, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        for (o, s) in outs.iter().zip(&model.config.stages) {
            assert_eq!(o.dim(1), s.channels);
        }
    }

    #[test]
    fn pyramid_needs_four_stages() {
        let model = Model::<f32>::new(ModelConfig::micro()).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(matches!(model.pyramid(&x, &mut Ctx::eval()), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::new(ModelConfig::micro()).unwrap();
        let b = Model::<f32>::new(ModelConfig::micro()).unwrap();
        for ((na, ta), (nb, tb)) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(na, &nb);
            assert!(ta.bit_eq(&tb));
        }
    }
}
