//! Loop-level reference implementation of the model, written directly from
//! the layer definitions. It reads weights by name, runs one image at a time
//! in inference mode, and counts every multiply-accumulate it performs.
#![allow(dead_code)]

use std::collections::HashMap;

use dmf::dyconv::ScoreMode;
use dmf::model::{Model, ModelConfig};
use dmf::nn::Module;
use dmf::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const GRN_EPS: f64 = 1e-6;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn hard_swish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// One feature map `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct Fm {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Fm {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Fm {
        Fm {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add(&self, other: &Fm) -> Fm {
        assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        Fm {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            ..*self
        }
    }

    pub fn pooled(&self) -> Vec<f64> {
        let n = self.h * self.w;
        self.data.chunks(n).map(|p| p.iter().sum::<f64>() / n as f64).collect()
    }
}

/// Direct convolution with zero padding `k / 2`. Counts one MAC per
/// kernel tap per output element.
pub fn conv(x: &Fm, w: &[f64], cout: usize, k: usize, stride: usize, groups: usize, macs: &mut u64) -> Fm {
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let (cin_g, cout_g) = (x.c / groups, cout / groups);
    assert_eq!(w.len(), cout * cin_g * k * k);
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let g = co / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            *macs += 1;
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += w[((co * cin_g + ci) * k + ky) * k + kx]
                                * x.at(g * cin_g + ci, iy as usize, ix as usize);
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Fm {
        c: cout,
        h: oh,
        w: ow,
        data: out,
    }
}

/// `x [din] · w [din, dout] + b`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, macs: &mut u64) -> Vec<f64> {
    let din = x.len();
    let dout = w.len() / din;
    (0..dout)
        .map(|j| {
            let mut acc = b.map_or(0.0, |b| b[j]);
            for i in 0..din {
                *macs += 1;
                acc += x[i] * w[i * dout + j];
            }
            acc
        })
        .collect()
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g[i] + b[i])
        .collect()
}

pub fn grn(x: &Fm, gamma: &[f64], beta: &[f64]) -> Fm {
    let n = x.h * x.w;
    let norms: Vec<f64> = x.data.chunks(n).map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mean = norms.iter().sum::<f64>() / x.c as f64;
    let mut out = x.clone();
    for c in 0..x.c {
        let s = norms[c] / (mean + GRN_EPS);
        for v in &mut out.data[c * n..(c + 1) * n] {
            *v = gamma[c] * (*v * s) + beta[c] + *v;
        }
    }
    out
}

pub struct Oracle {
    pub cfg: ModelConfig,
    pub weights: HashMap<String, Vec<f64>>,
    pub macs: u64,
    pub tau: f64,
}

/// Tokens `[M][d]`.
pub type Tokens = Vec<Vec<f64>>;

impl Oracle {
    pub fn new<T: dmf::Element>(model: &Model<T>) -> Self {
        let weights = model
            .named_state()
            .into_iter()
            .map(|(n, t, _)| (n, t.to_f64_vec()))
            .collect();
        Oracle {
            cfg: model.config.clone(),
            weights,
            macs: 0,
            tau: 1.0,
        }
    }

    pub fn w(&self, name: &str) -> &[f64] {
        self.weights.get(name).unwrap_or_else(|| panic!("no tensor `{name}`"))
    }

    fn has(&self, name: &str) -> bool {
        self.weights.contains_key(name)
    }

    fn conv_w(&mut self, name: &str, x: &Fm, cout: usize, k: usize, stride: usize, groups: usize) -> Fm {
        let w = self.w(&format!("{name}.weight")).to_vec();
        conv(x, &w, cout, k, stride, groups, &mut self.macs)
    }

    fn bn(&self, name: &str, x: &Fm) -> Fm {
        let (g, b) = (self.w(&format!("{name}.gamma")), self.w(&format!("{name}.beta")));
        let (rm, rv) = (self.w(&format!("{name}.running_mean")), self.w(&format!("{name}.running_var")));
        let n = x.h * x.w;
        let mut out = x.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i / n;
            *v = (*v - rm[c]) / (rv[c] + BN_EPS).sqrt() * g[c] + b[c];
        }
        out
    }

    fn lin(&mut self, name: &str, x: &[f64]) -> Vec<f64> {
        let w = self.w(&format!("{name}.weight")).to_vec();
        let b = self.weights.get(&format!("{name}.bias")).cloned();
        linear(x, &w, b.as_deref(), &mut self.macs)
    }

    /// Dynamic residual conv (or the plain conv of a static model).
    #[allow(clippy::too_many_arguments)]
    pub fn conv_unit(&mut self, name: &str, x: &Fm, z1: &[f64], cout: usize, k: usize, stride: usize, groups: usize) -> Fm {
        if self.has(&format!("{name}.weight")) {
            return self.conv_w(name, x, cout, k, stride, groups);
        }
        let opts = self.cfg.dyconv;
        let kk = opts.kernels;
        let scores = if opts.score_mode == ScoreMode::Constant {
            vec![1.0; kk]
        } else {
            let mut feat = x.pooled();
            if opts.token_input {
                feat.extend_from_slice(z1);
            }
            let h: Vec<f64> = self.lin(&format!("{name}.attn.fc1"), &feat).into_iter().map(|v| v.max(0.0)).collect();
            let logits: Vec<f64> = self.lin(&format!("{name}.attn.fc2"), &h).iter().map(|v| v / self.tau).collect();
            match opts.score_mode {
                ScoreMode::Sigmoid => logits.iter().map(|&v| sigmoid(v)).collect(),
                ScoreMode::Softmax => softmax(&logits),
                ScoreMode::Constant => unreachable!(),
            }
        };
        let ws = self.w(&format!("{name}.kernels.w_static")).to_vec();
        let p = ws.len() / kk;
        let mut agg = vec![0.0; p];
        for (i, a) in agg.iter_mut().enumerate() {
            for (j, s) in scores.iter().enumerate() {
                self.macs += 1;
                *a += s * ws[j * p + i];
            }
        }
        if let Some(wa) = self.weights.get(&format!("{name}.kernels.w_agnostic")) {
            for (a, w) in agg.iter_mut().zip(wa) {
                self.macs += 1;
                *a += w;
            }
        }
        conv(x, &agg, cout, k, stride, groups, &mut self.macs)
    }

    pub fn cross(&mut self, name: &str, z: &Tokens, x: &Fm) -> Tokens {
        let (heads, c, n) = (self.cfg.heads, x.c, x.h * x.w);
        let ch = c / heads;
        let (g, b) = (self.w(&format!("{name}.norm.gamma")).to_vec(), self.w(&format!("{name}.norm.beta")).to_vec());
        z.iter()
            .map(|tok| {
                let q = self.lin(&format!("{name}.wq"), &layer_norm(tok, &g, &b));
                let mut o = vec![0.0; c];
                for hd in 0..heads {
                    let slice = |ci: usize| &x.data[(hd * ch + ci) * n..(hd * ch + ci + 1) * n];
                    let mut s = vec![0.0; n];
                    for (pos, sv) in s.iter_mut().enumerate() {
                        for ci in 0..ch {
                            self.macs += 1;
                            *sv += q[hd * ch + ci] * slice(ci)[pos];
                        }
                        *sv /= (ch as f64).sqrt();
                    }
                    let a = softmax(&s);
                    for ci in 0..ch {
                        for pos in 0..n {
                            self.macs += 1;
                            o[hd * ch + ci] += a[pos] * slice(ci)[pos];
                        }
                    }
                }
                let out = self.lin(&format!("{name}.wo"), &o);
                tok.iter().zip(out).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    pub fn former(&mut self, name: &str, z: &Tokens) -> Tokens {
        let (m, d, heads) = (z.len(), z[0].len(), self.cfg.heads);
        let dh = d / heads;
        let g1 = self.w(&format!("{name}.norm1.gamma")).to_vec();
        let b1 = self.w(&format!("{name}.norm1.beta")).to_vec();
        let qkv: Vec<Vec<f64>> = z.iter().map(|t| self.lin(&format!("{name}.qkv"), &layer_norm(t, &g1, &b1))).collect();
        let mut attended = vec![vec![0.0; d]; m];
        for hd in 0..heads {
            let q = |i: usize, j: usize| qkv[i][hd * dh + j];
            let k = |i: usize, j: usize| qkv[i][d + hd * dh + j];
            let v = |i: usize, j: usize| qkv[i][2 * d + hd * dh + j];
            for i in 0..m {
                let mut s = vec![0.0; m];
                for (t, sv) in s.iter_mut().enumerate() {
                    for j in 0..dh {
                        self.macs += 1;
                        *sv += q(i, j) * k(t, j);
                    }
                    *sv /= (dh as f64).sqrt();
                }
                let a = softmax(&s);
                for j in 0..dh {
                    for t in 0..m {
                        self.macs += 1;
                        attended[i][hd * dh + j] += a[t] * v(t, j);
                    }
                }
            }
        }
        let g2 = self.w(&format!("{name}.norm2.gamma")).to_vec();
        let b2 = self.w(&format!("{name}.norm2.beta")).to_vec();
        (0..m)
            .map(|i| {
                let p = self.lin(&format!("{name}.proj"), &attended[i]);
                let z1: Vec<f64> = z[i].iter().zip(p).map(|(a, b)| a + b).collect();
                let h: Vec<f64> = self.lin(&format!("{name}.fc1"), &layer_norm(&z1, &g2, &b2)).into_iter().map(gelu).collect();
                let f = self.lin(&format!("{name}.fc2"), &h);
                z1.iter().zip(f).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    pub fn mobile(&mut self, name: &str, x: &Fm, z1: &[f64], cout: usize, expansion: usize, groups: usize, stride: usize) -> Fm {
        let e = x.c * expansion;
        let h = self.conv_unit(&format!("{name}.expand"), x, z1, e, 1, 1, groups);
        let h = self.bn(&format!("{name}.bn1"), &h).map(gelu);
        let h = self.conv_unit(&format!("{name}.dw"), &h, z1, e, 3, stride, e);
        let h = self.bn(&format!("{name}.bn2"), &h).map(gelu);
        let h = self.conv_unit(&format!("{name}.project"), &h, z1, cout, 1, 1, groups);
        let h = self.bn(&format!("{name}.bn3"), &h);
        if stride == 1 && cout == x.c {
            x.add(&h)
        } else {
            h
        }
    }

    pub fn irffn(&mut self, name: &str, x: &Fm, expansion: usize) -> Fm {
        let r = x.c * expansion;
        let h = self.conv_w(&format!("{name}.expand"), x, r, 1, 1, 1);
        let h = self.bn(&format!("{name}.bn1"), &h).map(gelu);
        let sc = self.conv_w(&format!("{name}.dw"), &h, r, 3, 1, r).map(gelu).add(&h);
        let h = grn(&sc, self.w(&format!("{name}.grn.gamma")), self.w(&format!("{name}.grn.beta")));
        let h = self.conv_w(&format!("{name}.project"), &h, x.c, 1, 1, 1);
        x.add(&self.bn(&format!("{name}.bn2"), &h))
    }

    /// Logits of one image `[C, H, W]`.
    pub fn forward(&mut self, image: &Fm) -> Vec<f64> {
        let cfg = self.cfg.clone();
        let stem = cfg.stem_channels;
        let x = self.conv_w("stem.conv", image, stem, 3, 2, 1);
        let x = self.bn("stem.bn", &x).map(hard_swish);
        let x = self.conv_w("stem.lite_dw", &x, stem * cfg.lite_multiplier, 3, 2, stem);
        let x = self.bn("stem.lite_bn1", &x).map(hard_swish);
        let x = self.conv_w("stem.lite_pw", &x, cfg.stages[0].channels, 1, 1, 1);
        let mut x = self.bn("stem.lite_bn2", &x);
        let d = cfg.token_dim;
        let mut z: Tokens = self.w("tokens").chunks(d).map(|c| c.to_vec()).collect();
        for (si, s) in cfg.stages.iter().enumerate() {
            if s.downsample {
                let name = format!("stages.{si}.downsample");
                let c = x.c;
                x = self.conv_w(&format!("{name}.dw"), &x, c, 3, 2, c);
                x = self.bn(&format!("{name}.bn"), &x);
                if c != s.channels {
                    x = self.conv_w(&format!("{name}.pw.conv"), &x, s.channels, 1, 1, 1);
                    x = self.bn(&format!("{name}.pw.bn"), &x);
                }
            }
            for bi in 0..s.blocks {
                let name = format!("stages.{si}.blocks.{bi}");
                z = self.cross(&format!("{name}.cross"), &z, &x);
                z = self.former(&format!("{name}.former"), &z);
                let z1 = z[0].clone();
                x = self.mobile(&format!("{name}.mobile"), &x, &z1, s.channels, s.expansion, s.groups, 1);
                x = self.irffn(&format!("{name}.ffn"), &x, s.irffn_expansion);
            }
        }
        let mut feat = x.pooled();
        feat.extend_from_slice(&z[0]);
        let h: Vec<f64> = self.lin("head.fc1", &feat).into_iter().map(hard_swish).collect();
        self.lin("head.fc2", &h)
    }
}

/// Splits a batch tensor into per-image feature maps.
pub fn images<T: dmf::Element>(t: &Tensor<T>) -> Vec<Fm> {
    let &[b, c, h, w] = t.shape() else { panic!("expected NCHW") };
    let data = t.to_f64_vec();
    (0..b)
        .map(|i| Fm {
            c,
            h,
            w,
            data: data[i * c * h * w..(i + 1) * c * h * w].to_vec(),
        })
        .collect()
}

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Adds uniform noise of width `amount` to every parameter and buffer-free
/// tensor, so zero-initialized paths are exercised. Variances stay positive.
pub fn perturb<T: dmf::Element>(model: &mut Model<T>, amount: f64, seed: u64) {
    let mut s = seed;
    model.visit_mut("", &mut |name, t, _| {
        s = s.wrapping_add(1);
        let n = noise(t.numel(), s);
        let d: Vec<f64> = t
            .to_f64_vec()
            .iter()
            .zip(n)
            .map(|(v, e)| if name.ends_with("running_var") { v * (1.0 + 0.5 * e.abs()) } else { v + amount * e })
            .collect();
        *t = Tensor::<T>::from_f64(&d, t.shape()).unwrap();
    });
}
