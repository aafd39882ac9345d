//! The global-token path: light cross-attention from the local feature map
//! into the tokens, followed by a standard pre-norm transformer block.

use crate::error::{Error, Result};
use crate::nn::{impl_module, Init, LayerNorm, Linear};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

/// Cross-attention `X → Z` with only query and output projections; keys and
/// values are raw channel slices of the feature map.
///
/// Head `i` projects the (normalized) tokens to `C / heads` dims and attends
/// over the `N = H·W` positions of channel slice `i`. The concatenated heads
/// (`C` dims) are mapped back to the token width `d` and added to `Z`.
pub struct CrossAttention<T: Element> {
    pub norm: LayerNorm<T>,
    /// `[d, C]`: the per-head query projections side by side.
    pub wq: Linear<T>,
    /// `[C, d]`
    pub wo: Linear<T>,
    pub heads: usize,
}
impl_module!(CrossAttention { norm, wq, wo });

impl<T: Element> CrossAttention<T> {
    pub fn new(init: &mut Init, token_dim: usize, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "cross-attention: {heads} heads do not divide {channels} channels"
            )));
        }
        Ok(CrossAttention {
            norm: LayerNorm::new(init, token_dim),
            wq: Linear::new(init, token_dim, channels, false),
            wo: Linear::new(init, channels, token_dim, true),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.dout()
    }

    /// `z: [B, M, d]`, `x: [B, C, H, W]` → `[B, M, d]`.
    pub fn forward(&self, z: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::shape("cross_attention", format!("expected X [B,C,H,W], got {:?}", x.shape())));
        };
        let &[bz, m, _] = z.shape() else {
            return Err(Error::shape("cross_attention", format!("expected Z [B,M,d], got {:?}", z.shape())));
        };
        if bz != b || c != self.channels() {
            return Err(Error::shape(
                "cross_attention",
                format!("Z {:?} incompatible with X {:?}", z.shape(), x.shape()),
            ));
        }
        let (nh, ch, n) = (self.heads, c / self.heads, h * w);
        let q = self.wq.forward(&self.norm.forward(z)?)?;
        let q = ops::permute(&ops::reshape(&q, &[b, m, nh, ch])?, &[0, 2, 1, 3])?;
        // [B, heads, ch, N] is already kᵀ for each head.
        let kt = ops::reshape(x, &[b, nh, ch, n])?;
        let scores = ops::scale(&ops::matmul(&q, &kt)?, T::lit(1.0 / (ch as f64).sqrt()))?;
        let attn = ops::softmax(&scores, 3)?;
        let v = ops::permute(&kt, &[0, 1, 3, 2])?;
        let o = ops::matmul(&attn, &v)?;
        let o = ops::reshape(&ops::permute(&o, &[0, 2, 1, 3])?, &[b, m, c])?;
        ops::add(z, &self.wo.forward(&o)?)
    }
}

/// Pre-norm transformer block over the tokens: multi-head self-attention and
/// a 2× GELU feed-forward network, each with a residual connection.
pub struct Former<T: Element> {
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}
impl_module!(Former { norm1, qkv, proj, norm2, fc1, fc2 });

/// Expansion ratio of the Former feed-forward network.
pub const FFN_RATIO: usize = 2;

impl<T: Element> Former<T> {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("former: {heads} heads do not divide token dim {dim}")));
        }
        Ok(Former {
            norm1: LayerNorm::new(init, dim),
            qkv: Linear::new(init, dim, 3 * dim, true),
            proj: Linear::new(init, dim, dim, true),
            norm2: LayerNorm::new(init, dim),
            fc1: Linear::new(init, dim, FFN_RATIO * dim, true),
            fc2: Linear::new(init, FFN_RATIO * dim, dim, true),
            heads,
        })
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, m, d] = z.shape() else {
            return Err(Error::shape("former", format!("expected Z [B,M,d], got {:?}", z.shape())));
        };
        let (nh, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(&self.norm1.forward(z)?)?;
        let qkv = ops::permute(&ops::reshape(&qkv, &[b, m, 3, nh, dh])?, &[2, 0, 3, 1, 4])?;
        let part = |i| ops::reshape(&ops::narrow(&qkv, 0, i, 1)?, &[b, nh, m, dh]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = ops::scale(
            &ops::matmul(&q, &ops::permute(&k, &[0, 1, 3, 2])?)?,
            T::lit(1.0 / (dh as f64).sqrt()),
        )?;
        let o = ops::matmul(&ops::softmax(&scores, 3)?, &v)?;
        let o = ops::reshape(&ops::permute(&o, &[0, 2, 1, 3])?, &[b, m, d])?;
        let z = ops::add(z, &self.proj.forward(&o)?)?;
        let hidden = ops::gelu(&self.fc1.forward(&self.norm2.forward(&z)?)?)?;
        ops::add(&z, &self.fc2.forward(&hidden)?)
    }
}

/// Multiply-accumulate counts of one cross-attention + Former pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FormerMacs {
    /// Token→query projection, `M·d·C`.
    pub cross_query: u64,
    /// Scores and weighted values, `2·M·N·C`.
    pub cross_attend: u64,
    /// Output projection back to tokens, `M·C·d`.
    pub cross_out: u64,
    /// Q/K/V and output projections, `4·M·d²`.
    pub self_proj: u64,
    /// Scores and weighted values, `2·M²·d`.
    pub self_attend: u64,
    /// Feed-forward network, `2·FFN_RATIO·M·d²`.
    pub ffn: u64,
}

impl FormerMacs {
    pub fn cross(&self) -> u64 {
        self.cross_query + self.cross_attend + self.cross_out
    }

    pub fn former(&self) -> u64 {
        self.self_proj + self.self_attend + self.ffn
    }

    pub fn total(&self) -> u64 {
        self.cross() + self.former()
    }
}

/// Exact MACs of cross-attention plus Former for `m` tokens of width `d`
/// over a feature map of `n` positions and `c` channels. The head count
/// changes how the work is split, not how much there is.
pub fn former_macs(m: usize, d: usize, n: usize, c: usize, _heads: usize) -> FormerMacs {
    let (m, d, n, c) = (m as u64, d as u64, n as u64, c as u64);
    FormerMacs {
        cross_query: m * d * c,
        cross_attend: 2 * m * n * c,
        cross_out: m * c * d,
        self_proj: 4 * m * d * d,
        self_attend: 2 * m * m * d,
        ffn: 2 * FFN_RATIO as u64 * m * d * d,
    }
}

pub fn count_former_flops(m: usize, d: usize, n: usize, c: usize, heads: usize) -> u64 {
    former_macs(m, d, n, c, heads).total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_token_set_costs_nothing() {
        assert_eq!(count_former_flops(0, 192, 196, 96, 4), 0);
    }

    #[test]
    fn doubling_positions_doubles_attend_term_only() {
        let a = former_macs(6, 192, 196, 96, 4);
        let b = former_macs(6, 192, 392, 96, 4);
        assert_eq!(b.cross_attend, 2 * a.cross_attend);
        assert_eq!(b.total() - a.total(), a.cross_attend);
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut init = Init::new(0);
        assert!(CrossAttention::<f32>::new(&mut init, 8, 10, 4).is_err());
        assert!(Former::<f32>::new(&mut init, 10, 4).is_err());
    }
}
