//! Composite blocks of the backbone.

use crate::attention::{CrossAttention, Former};
use crate::dyconv::{ConvUnit, DyConvOptions};
use crate::error::{Error, Result};
use crate::nn::{drop_path, dropout, impl_module, BatchNorm2d, Conv2d, Ctx, Init, Linear};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

/// Global response normalization with learnable per-channel scale and shift.
/// Both start at zero, which makes the layer an identity.
pub struct Grn<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}
impl_module!(Grn { gamma, beta });

impl<T: Element> Grn<T> {
    pub const EPS: f64 = 1e-6;

    pub fn new(init: &mut Init, channels: usize) -> Self {
        Grn {
            gamma: init.zeros(&[channels]),
            beta: init.zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::grn(x, &self.gamma, &self.beta, Self::EPS)
    }
}

/// Inverted bottleneck built from dynamic residual convolutions:
/// 1×1 group conv (expand) → 3×3 depthwise → 1×1 group conv (project).
pub struct DyMobile<T: Element> {
    pub expand: ConvUnit<T>,
    pub bn1: BatchNorm2d<T>,
    pub dw: ConvUnit<T>,
    pub bn2: BatchNorm2d<T>,
    pub project: ConvUnit<T>,
    pub bn3: BatchNorm2d<T>,
    pub residual: bool,
    pub drop_path: f64,
}
impl_module!(DyMobile { expand, bn1, dw, bn2, project, bn3 });

impl<T: Element> DyMobile<T> {
    /// `dynamic = None` builds the same block from plain convolutions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        expansion: usize,
        groups: usize,
        stride: usize,
        token_dim: usize,
        dynamic: Option<&DyConvOptions>,
        drop_path: f64,
    ) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::config(format!("DY-Mobile stride must be 1 or 2, got {stride}")));
        }
        let hidden = cin * expansion;
        if cin % groups != 0 || cout % groups != 0 || hidden % groups != 0 {
            return Err(Error::config(format!(
                "DY-Mobile: groups={groups} must divide Cin={cin}, hidden={hidden} and Cout={cout}"
            )));
        }
        Ok(DyMobile {
            expand: ConvUnit::new(init, dynamic, cin, hidden, 1, 1, groups, token_dim)?,
            bn1: BatchNorm2d::new(init, hidden),
            dw: ConvUnit::new(init, dynamic, hidden, hidden, 3, stride, hidden, token_dim)?,
            bn2: BatchNorm2d::new(init, hidden),
            project: ConvUnit::new(init, dynamic, hidden, cout, 1, 1, groups, token_dim)?,
            bn3: BatchNorm2d::new(init, cout),
            residual: stride == 1 && cin == cout,
            drop_path,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, z1: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let tau = ctx.tau;
        let h = ops::gelu(&self.bn1.forward(&self.expand.forward(x, z1, tau)?, ctx)?)?;
        let h = ops::gelu(&self.bn2.forward(&self.dw.forward(&h, z1, tau)?, ctx)?)?;
        let h = self.bn3.forward(&self.project.forward(&h, z1, tau)?, ctx)?;
        if self.residual {
            ops::add(x, &drop_path(&h, self.drop_path, ctx)?)
        } else {
            Ok(h)
        }
    }
}

/// Inverted residual feed-forward network:
/// `x + BN(1×1(GRN(SC(GELU(BN(1×1(x)))))))` with
/// `SC(h) = GELU(3×3 depthwise(h)) + h`.
pub struct Irffn<T: Element> {
    pub expand: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub dw: Conv2d<T>,
    pub grn: Grn<T>,
    pub project: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub drop_path: f64,
}
impl_module!(Irffn { expand, bn1, dw, grn, project, bn2 });

impl<T: Element> Irffn<T> {
    pub fn new(init: &mut Init, channels: usize, expansion: usize, drop_path: f64) -> Self {
        let hidden = channels * expansion;
        Irffn {
            expand: Conv2d::new(init, channels, hidden, 1, 1, 1, false),
            bn1: BatchNorm2d::new(init, hidden),
            dw: Conv2d::new(init, hidden, hidden, 3, 1, hidden, false),
            grn: Grn::new(init, hidden),
            project: Conv2d::new(init, hidden, channels, 1, 1, 1, false),
            bn2: BatchNorm2d::new(init, channels),
            drop_path,
        }
    }

    /// The residual branch alone (no outer shortcut, no drop-path).
    pub fn branch(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let h = ops::gelu(&self.bn1.forward(&self.expand.forward(x)?, ctx)?)?;
        let sc = ops::add(&ops::gelu(&self.dw.forward(&h)?)?, &h)?;
        let h = self.grn.forward(&sc)?;
        self.bn2.forward(&self.project.forward(&h)?, ctx)
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let branch = self.branch(x, ctx)?;
        ops::add(x, &drop_path(&branch, self.drop_path, ctx)?)
    }
}

/// First token `Z[:, 0, :]` as `[B, d]`.
pub fn first_token<T: Element>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, _, d] = z.shape() else {
        return Err(Error::shape("first_token", format!("expected Z [B,M,d], got {:?}", z.shape())));
    };
    ops::reshape(&ops::narrow(z, 1, 0, 1)?, &[b, d])
}

/// One DMF block: cross-attention and Former update the tokens, then the
/// updated first token conditions DY-Mobile, followed by IRFFN.
pub struct DmfBlock<T: Element> {
    pub cross: CrossAttention<T>,
    pub former: Former<T>,
    pub mobile: DyMobile<T>,
    pub ffn: Irffn<T>,
}
impl_module!(DmfBlock { cross, former, mobile, ffn });

/// Shape parameters of one [`DmfBlock`].
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub channels: usize,
    pub expansion: usize,
    pub irffn_expansion: usize,
    pub groups: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub drop_path: f64,
}

impl<T: Element> DmfBlock<T> {
    pub fn new(init: &mut Init, spec: &BlockSpec, dynamic: Option<&DyConvOptions>) -> Result<Self> {
        let c = spec.channels;
        Ok(DmfBlock {
            cross: CrossAttention::new(init, spec.token_dim, c, spec.heads)?,
            former: Former::new(init, spec.token_dim, spec.heads)?,
            mobile: DyMobile::new(
                init,
                c,
                c,
                spec.expansion,
                spec.groups,
                1,
                spec.token_dim,
                dynamic,
                spec.drop_path,
            )?,
            ffn: Irffn::new(init, c, spec.irffn_expansion, spec.drop_path),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, z: &Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Tensor<T>)> {
        let z = self.former.forward(&self.cross.forward(z, x)?)?;
        let z1 = first_token(&z)?;
        let x = self.mobile.forward(x, &z1, ctx)?;
        let x = self.ffn.forward(&x, ctx)?;
        Ok((x, z))
    }
}

/// 3×3 stride-2 stem followed by the lite bottleneck (3×3 depthwise stride-2
/// channel expansion, then 1×1 squeeze): output at stride 4.
pub struct Stem<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub lite_dw: Conv2d<T>,
    pub lite_bn1: BatchNorm2d<T>,
    pub lite_pw: Conv2d<T>,
    pub lite_bn2: BatchNorm2d<T>,
}
impl_module!(Stem { conv, bn, lite_dw, lite_bn1, lite_pw, lite_bn2 });

impl<T: Element> Stem<T> {
    pub fn new(init: &mut Init, in_channels: usize, stem: usize, multiplier: usize, out: usize) -> Self {
        let mid = stem * multiplier;
        Stem {
            conv: Conv2d::new(init, in_channels, stem, 3, 2, 1, false),
            bn: BatchNorm2d::new(init, stem),
            lite_dw: Conv2d::new(init, stem, mid, 3, 2, stem, false),
            lite_bn1: BatchNorm2d::new(init, mid),
            lite_pw: Conv2d::new(init, mid, out, 1, 1, 1, false),
            lite_bn2: BatchNorm2d::new(init, out),
        }
    }

    pub fn forward(&self, image: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        if image.rank() != 4 || image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0 {
            return Err(Error::shape(
                "stem",
                format!("input {:?} must be [B,C,H,W] with H and W divisible by 4", image.shape()),
            ));
        }
        let x = ops::hard_swish(&self.bn.forward(&self.conv.forward(image)?, ctx)?)?;
        let x = ops::hard_swish(&self.lite_bn1.forward(&self.lite_dw.forward(&x)?, ctx)?)?;
        self.lite_bn2.forward(&self.lite_pw.forward(&x)?, ctx)
    }
}

pub struct Pointwise<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}
impl_module!(Pointwise { conv, bn });

/// 3×3 depthwise stride-2 convolution, plus a 1×1 projection when the stage
/// width changes.
pub struct Downsample<T: Element> {
    pub dw: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub pw: Option<Pointwise<T>>,
}
impl_module!(Downsample { dw, bn, pw });

impl<T: Element> Downsample<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize) -> Self {
        Downsample {
            dw: Conv2d::new(init, cin, cin, 3, 2, cin, false),
            bn: BatchNorm2d::new(init, cin),
            pw: (cin != cout).then(|| Pointwise {
                conv: Conv2d::new(init, cin, cout, 1, 1, 1, false),
                bn: BatchNorm2d::new(init, cout),
            }),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let x = self.bn.forward(&self.dw.forward(x)?, ctx)?;
        match &self.pw {
            Some(pw) => pw.bn.forward(&pw.conv.forward(&x)?, ctx),
            None => Ok(x),
        }
    }
}

/// `concat(GAP(x), Z[:,0,:]) → FC → hard-swish → FC`.
pub struct ClassifierHead<T: Element> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub dropout: f64,
}
impl_module!(ClassifierHead { fc1, fc2 });

impl<T: Element> ClassifierHead<T> {
    pub fn new(init: &mut Init, channels: usize, token_dim: usize, hidden: usize, classes: usize, dropout: f64) -> Self {
        ClassifierHead {
            fc1: Linear::new(init, channels + token_dim, hidden, true),
            fc2: Linear::new(init, hidden, classes, true),
            dropout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, z: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let feat = ops::concat(&[ops::global_avg_pool(x)?, first_token(z)?], 1)?;
        let h = ops::hard_swish(&self.fc1.forward(&feat)?)?;
        let h = dropout(&h, self.dropout, ctx)?;
        self.fc2.forward(&h)
    }
}
