//! Analytic multiply-accumulate and parameter counts.
//!
//! The headline number counts MACs of convolutions, linear layers, attention
//! matmuls, kernel attention and kernel aggregation (one MAC per static kernel
//! element per score, plus one per element for the residual kernel add).
//! Normalizations, activations, pooling and residual adds are tallied
//! separately as `aux_ops` and left out of the headline.

use serde::Serialize;

use crate::attention::{former_macs, FFN_RATIO};
use crate::dyconv::{DyConvOptions, ScoreMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::ops::conv_out_extent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    Stem,
    Downsample,
    Tokens,
    DyMobile,
    KernelAttention,
    Irffn,
    Attention,
    Former,
    Head,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 9] = [
        ModuleKind::Stem,
        ModuleKind::Downsample,
        ModuleKind::Tokens,
        ModuleKind::DyMobile,
        ModuleKind::KernelAttention,
        ModuleKind::Irffn,
        ModuleKind::Attention,
        ModuleKind::Former,
        ModuleKind::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Stem => "stem",
            ModuleKind::Downsample => "downsample",
            ModuleKind::Tokens => "tokens",
            ModuleKind::DyMobile => "dy-mobile",
            ModuleKind::KernelAttention => "kernel-attention",
            ModuleKind::Irffn => "irffn",
            ModuleKind::Attention => "attention",
            ModuleKind::Former => "former",
            ModuleKind::Head => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: ModuleKind,
    pub macs: u64,
    pub params: u64,
    pub aux_ops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub model: String,
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub records: Vec<LayerRecord>,
}

impl FlopsReport {
    pub fn total_macs(&self) -> u64 {
        self.records.iter().map(|r| r.macs).sum()
    }

    /// Two FLOPs per MAC.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn total_params(&self) -> u64 {
        self.records.iter().map(|r| r.params).sum()
    }

    pub fn aux_ops(&self) -> u64 {
        self.records.iter().map(|r| r.aux_ops).sum()
    }

    pub fn subtotal(&self, kind: ModuleKind) -> u64 {
        self.records.iter().filter(|r| r.kind == kind).map(|r| r.macs).sum()
    }

    /// `(kind, MACs, params)` for every kind.
    pub fn subtotals(&self) -> Vec<(ModuleKind, u64, u64)> {
        ModuleKind::ALL
            .iter()
            .map(|&k| {
                let params = self.records.iter().filter(|r| r.kind == k).map(|r| r.params).sum();
                (k, self.subtotal(k), params)
            })
            .collect()
    }

    pub fn record(&self, name: &str) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{} @ {}x{}x{}\n{:<18} {:>14} {:>12}\n",
            self.model, self.input[0], self.input[1], self.input[2], "module", "MACs", "params"
        );
        for (k, macs, params) in self.subtotals() {
            out += &format!("{:<18} {:>14} {:>12}\n", k.name(), macs, params);
        }
        out += &format!(
            "{:<18} {:>14} {:>12}\ntotal: {:.1}M MACs ({:.1}M FLOPs), {:.2}M params, {} aux ops\n",
            "total",
            self.total_macs(),
            self.total_params(),
            self.total_macs() as f64 / 1e6,
            self.total_flops() as f64 / 1e6,
            self.total_params() as f64 / 1e6,
            self.aux_ops(),
        );
        out
    }
}

/// MACs of one convolution: `Cout·(Cin/g)·kh·kw·H'·W'`.
pub fn conv_macs(cin: usize, cout: usize, k: usize, groups: usize, out_h: usize, out_w: usize) -> u64 {
    (cout * (cin / groups) * k * k * out_h * out_w) as u64
}

struct Counter {
    records: Vec<LayerRecord>,
}

impl Counter {
    fn push(&mut self, name: String, kind: ModuleKind, macs: u64, params: u64, aux_ops: u64) {
        self.records.push(LayerRecord {
            name,
            kind,
            macs,
            params,
            aux_ops,
        });
    }

    /// Plain conv (no bias) followed by batch norm; returns the output extent.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        name: &str,
        kind: ModuleKind,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        hw: (usize, usize),
        activated: bool,
    ) -> Result<(usize, usize)> {
        let (oh, ow) = out_extent(name, hw, k, stride)?;
        let numel = (cout * oh * ow) as u64;
        let params = (cout * (cin / groups) * k * k) as u64;
        self.push(
            format!("{name}.conv"),
            kind,
            conv_macs(cin, cout, k, groups, oh, ow),
            params,
            0,
        );
        let aux = if activated { 2 * numel } else { numel };
        self.push(format!("{name}.bn"), kind, 0, 2 * cout as u64, aux);
        Ok((oh, ow))
    }

    /// Dynamic residual conv: kernel attention, aggregation and the
    /// convolution with the aggregated kernel.
    #[allow(clippy::too_many_arguments)]
    fn dyres(
        &mut self,
        name: &str,
        opts: &DyConvOptions,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        token_dim: usize,
        hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        let (oh, ow) = out_extent(name, hw, k, stride)?;
        let kernel_numel = (cout * (cin / groups) * k * k) as u64;
        let kk = opts.kernels as u64;
        if opts.score_mode != ScoreMode::Constant {
            let din = cin + if opts.token_input { token_dim } else { 0 };
            let hidden = opts.hidden_width(din);
            let macs = (din * hidden + hidden * opts.kernels) as u64;
            let params = macs + (hidden + opts.kernels) as u64;
            // pooling, ReLU and score activation
            let aux = (cin * hw.0 * hw.1 + hidden + opts.kernels) as u64;
            self.push(format!("{name}.attn"), ModuleKind::KernelAttention, macs, params, aux);
        }
        let residual = if opts.residual { kernel_numel } else { 0 };
        self.push(
            format!("{name}.aggregate"),
            ModuleKind::DyMobile,
            kk * kernel_numel + residual,
            kk * kernel_numel + residual,
            0,
        );
        self.push(
            format!("{name}.conv"),
            ModuleKind::DyMobile,
            conv_macs(cin, cout, k, groups, oh, ow),
            0,
            0,
        );
        Ok((oh, ow))
    }
}

fn out_extent(name: &str, (h, w): (usize, usize), k: usize, stride: usize) -> Result<(usize, usize)> {
    match (conv_out_extent(h, k, stride, k / 2), conv_out_extent(w, k, stride, k / 2)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::shape("count_flops", format!("{name}: {k}x{k} kernel does not fit {h}x{w}"))),
    }
}

/// Per-image MAC and parameter counts of the model described by `cfg` on an
/// input of `[C, H, W]`.
pub fn count_flops(cfg: &ModelConfig, input: [usize; 3]) -> Result<FlopsReport> {
    cfg.validate()?;
    let [c_in, h, w] = input;
    if c_in != cfg.in_channels || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(
            "count_flops",
            format!("input {input:?} must have {} channels and extents divisible by 4", cfg.in_channels),
        ));
    }
    let mut n = Counter { records: Vec::new() };
    let (m, d) = (cfg.tokens, cfg.token_dim);
    let stem = cfg.stem_channels;
    let mid = stem * cfg.lite_multiplier;
    let first = cfg.stages[0].channels;
    let mut hw = n.conv_bn("stem.conv", ModuleKind::Stem, c_in, stem, 3, 2, 1, (h, w), true)?;
    hw = n.conv_bn("stem.lite_dw", ModuleKind::Stem, stem, mid, 3, 2, stem, hw, true)?;
    hw = n.conv_bn("stem.lite_pw", ModuleKind::Stem, mid, first, 1, 1, 1, hw, false)?;
    n.push("tokens".into(), ModuleKind::Tokens, 0, (m * d) as u64, 0);

    let mut width = first;
    for (si, s) in cfg.stages.iter().enumerate() {
        let c = s.channels;
        if s.downsample {
            let name = format!("stages.{si}.downsample");
            hw = n.conv_bn(&format!("{name}.dw"), ModuleKind::Downsample, width, width, 3, 2, width, hw, false)?;
            if width != c {
                n.conv_bn(&format!("{name}.pw"), ModuleKind::Downsample, width, c, 1, 1, 1, hw, false)?;
            }
        }
        width = c;
        let positions = hw.0 * hw.1;
        let numel = (c * positions) as u64;
        for bi in 0..s.blocks {
            let name = format!("stages.{si}.blocks.{bi}");
            let fm = former_macs(m, d, positions, c, cfg.heads);
            let (md, mc) = ((m * d) as u64, (m * c) as u64);
            n.push(
                format!("{name}.cross"),
                ModuleKind::Attention,
                fm.cross(),
                (2 * d + d * c + c * d + d) as u64,
                // layer norm, softmax, residual add
                2 * md + (cfg.heads * m * positions) as u64 + mc + md,
            );
            let hidden = FFN_RATIO * d;
            n.push(
                format!("{name}.former"),
                ModuleKind::Former,
                fm.former(),
                (4 * d + 3 * d * d + 3 * d + d * d + d + d * hidden + hidden + hidden * d + d) as u64,
                4 * md + (m * m * cfg.heads) as u64 + (m * hidden) as u64 + 2 * md,
            );

            let mob = format!("{name}.mobile");
            let e = c * s.expansion;
            match cfg.dynamic_options() {
                Some(opts) => {
                    let mut shw = hw;
                    shw = n.dyres(&format!("{mob}.expand"), opts, c, e, 1, 1, s.groups, d, shw)?;
                    shw = n.dyres(&format!("{mob}.dw"), opts, e, e, 3, 1, e, d, shw)?;
                    n.dyres(&format!("{mob}.project"), opts, e, c, 1, 1, s.groups, d, shw)?;
                }
                None => {
                    let k = ModuleKind::DyMobile;
                    let mut shw = hw;
                    shw = n.conv_bn_plain(&format!("{mob}.expand"), k, c, e, 1, s.groups, shw)?;
                    shw = n.conv_bn_plain(&format!("{mob}.dw"), k, e, e, 3, e, shw)?;
                    n.conv_bn_plain(&format!("{mob}.project"), k, e, c, 1, s.groups, shw)?;
                }
            }
            let ep = (e * positions) as u64;
            n.push(
                format!("{mob}.bn"),
                ModuleKind::DyMobile,
                0,
                (2 * e + 2 * e + 2 * c) as u64,
                2 * ep + 2 * ep + numel + numel,
            );

            let ffn = format!("{name}.ffn");
            let r = c * s.irffn_expansion;
            let rp = (r * positions) as u64;
            n.conv_bn(&format!("{ffn}.expand"), ModuleKind::Irffn, c, r, 1, 1, 1, hw, true)?;
            n.push(
                format!("{ffn}.dw"),
                ModuleKind::Irffn,
                conv_macs(r, r, 3, r, hw.0, hw.1),
                (r * 9) as u64,
                2 * rp,
            );
            n.push(format!("{ffn}.grn"), ModuleKind::Irffn, 0, 2 * r as u64, 3 * rp);
            n.conv_bn(&format!("{ffn}.project"), ModuleKind::Irffn, r, c, 1, 1, 1, hw, false)?;
            n.push(format!("{ffn}.residual"), ModuleKind::Irffn, 0, 0, numel);
        }
    }

    let hidden = cfg.head_hidden;
    let feat = width + d;
    n.push(
        "head.fc1".into(),
        ModuleKind::Head,
        (feat * hidden) as u64,
        (feat * hidden + hidden) as u64,
        (width * hw.0 * hw.1 + hidden) as u64,
    );
    n.push(
        "head.fc2".into(),
        ModuleKind::Head,
        (hidden * cfg.num_classes) as u64,
        (hidden * cfg.num_classes + cfg.num_classes) as u64,
        0,
    );
    Ok(FlopsReport {
        model: cfg.name.clone(),
        input,
        records: n.records,
    })
}

impl Counter {
    /// Plain bias-free conv whose batch norm is booked by the caller.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn_plain(
        &mut self,
        name: &str,
        kind: ModuleKind,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        let (oh, ow) = out_extent(name, hw, k, 1)?;
        self.push(
            format!("{name}.conv"),
            kind,
            conv_macs(cin, cout, k, groups, oh, ow),
            (cout * (cin / groups) * k * k) as u64,
            0,
        );
        Ok((oh, ow))
    }
}
