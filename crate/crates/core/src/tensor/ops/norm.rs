use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn nchw(op: &'static str, x: &Tensor<impl Element>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::shape(op, format!("expected [B,C,H,W], got {:?}", x.shape()))),
    }
}

fn check_channel_params<T: Element>(op: &'static str, c: usize, ps: &[&Tensor<T>]) -> Result<()> {
    for p in ps {
        if p.shape() != [c] {
            return Err(Error::shape(op, format!("per-channel parameter {:?} for {c} channels", p.shape())));
        }
    }
    Ok(())
}

/// Batch statistics computed by [`batch_norm_train`].
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the value folded into running statistics.
    pub var_unbiased: Vec<T>,
}

/// Batch normalization with statistics from the batch itself.
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (b, c, hw) = nchw("batch_norm", x)?;
    check_channel_params("batch_norm", c, &[gamma, beta])?;
    let n = b * hw;
    if n < 2 {
        return Err(Error::config(format!(
            "batch_norm in training mode needs at least 2 values per channel, got {n}"
        )));
    }
    let xd = x.data();
    let nt = T::lit(n as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            mean[ci] += plane.iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= nt);
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            var[ci] += plane.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
        }
    }
    let var_unbiased: Vec<T> = var.iter().map(|&v| v / T::lit((n - 1) as f64)).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / nt + T::lit(eps)).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
        let ci = (i / hw) % c;
        *xh = (v - mean[ci]) * inv_std[ci];
        *o = *xh * gamma.data()[ci] + beta.data()[ci];
    }
    let gc = gamma.clone();
    let y = Tensor::from_op(
        "batch_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, (&gv, &xh)) in g.iter().zip(&xhat).enumerate() {
                let ci = (i / hw) % c;
                dgamma[ci] += gv * xh;
                dbeta[ci] += gv;
            }
            // dx = γ/σ · (g - mean(g) - x̂·mean(g·x̂))
            let gx = g
                .iter()
                .zip(&xhat)
                .enumerate()
                .map(|(i, (&gv, &xh))| {
                    let ci = (i / hw) % c;
                    gc.data()[ci] * inv_std[ci] * (gv - dbeta[ci] / nt - xh * dgamma[ci] / nt)
                })
                .collect();
            vec![Some(gx), Some(dgamma), Some(dbeta)]
        },
    )?;
    Ok((y, BatchStats { mean, var_unbiased }))
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, hw) = nchw("batch_norm", x)?;
    check_channel_params("batch_norm", c, &[gamma, beta])?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batch_norm", "running statistics do not match channel count"));
    }
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
    let mean = running_mean.to_vec();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ci = (i / hw) % c;
            (v - mean[ci]) * (gamma.data()[ci] * inv_std[ci]) + beta.data()[ci]
        })
        .collect();
    let (xc, gc) = (x.clone(), gamma.clone());
    Tensor::from_op(
        "batch_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut gx = Vec::with_capacity(g.len());
            for (i, (&gv, &v)) in g.iter().zip(xc.data()).enumerate() {
                let ci = (i / hw) % c;
                dgamma[ci] += gv * (v - mean[ci]) * inv_std[ci];
                dbeta[ci] += gv;
                gx.push(gv * gc.data()[ci] * inv_std[ci]);
            }
            vec![Some(gx), Some(dgamma), Some(dbeta)]
        },
    )
}

/// Layer normalization over the trailing axis.
pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
    check_channel_params("layer_norm", d, &[gamma, beta])?;
    let dt = T::lit(d as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / d.max(1));
    for (row, xh) in x.data().chunks_exact(d).zip(xhat.chunks_exact_mut(d)) {
        let mu = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
        let is = T::one() / (var + T::lit(eps)).sqrt();
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mu) * is;
        }
        inv_std.push(is);
    }
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, &xh)| xh * gamma.data()[i % d] + beta.data()[i % d])
        .collect();
    let gc = gamma.clone();
    Tensor::from_op(
        "layer_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut gx = vec![T::zero(); g.len()];
            for (r, ((grow, xrow), gxrow)) in g
                .chunks_exact(d)
                .zip(xhat.chunks_exact(d))
                .zip(gx.chunks_exact_mut(d))
                .enumerate()
            {
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..d {
                    dgamma[j] += grow[j] * xrow[j];
                    dbeta[j] += grow[j];
                    let dxh = grow[j] * gc.data()[j];
                    m1 += dxh;
                    m2 += dxh * xrow[j];
                }
                m1 /= dt;
                m2 /= dt;
                for j in 0..d {
                    let dxh = grow[j] * gc.data()[j];
                    gxrow[j] = inv_std[r] * (dxh - m1 - xrow[j] * m2);
                }
            }
            vec![Some(gx), Some(dgamma), Some(dbeta)]
        },
    )
}

/// Global response normalization:
/// `G[b,c] = ‖x[b,c,:,:]‖₂`, `N = G / (mean_c G + eps)`,
/// `out = γ·(x·N) + β + x`.
pub fn grn<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (b, c, hw) = nchw("grn", x)?;
    check_channel_params("grn", c, &[gamma, beta])?;
    let xd = x.data();
    let eps = T::lit(eps);
    let ct = T::lit(c as f64);
    let norms: Vec<T> = xd
        .chunks_exact(hw)
        .map(|plane| plane.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    let denom: Vec<T> = norms
        .chunks_exact(c)
        .map(|row| row.iter().copied().sum::<T>() / ct + eps)
        .collect();
    let scale: Vec<T> = norms
        .iter()
        .enumerate()
        .map(|(i, &gn)| gn / denom[i / c])
        .collect();
    let out = xd
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let bc = i / hw;
            let ci = bc % c;
            gamma.data()[ci] * (v * scale[bc]) + beta.data()[ci] + v
        })
        .collect();
    let (xc, gc) = (x.clone(), gamma.clone());
    Tensor::from_op(
        "grn",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let xd = xc.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dscale = vec![T::zero(); b * c];
            let mut gx = vec![T::zero(); xd.len()];
            for (i, (&gv, &v)) in g.iter().zip(xd).enumerate() {
                let bc = i / hw;
                let ci = bc % c;
                dgamma[ci] += gv * v * scale[bc];
                dbeta[ci] += gv;
                dscale[bc] += gv * gc.data()[ci] * v;
                gx[i] = gv * (T::one() + gc.data()[ci] * scale[bc]);
            }
            // scale = G / D with D = mean_c(G) + eps
            for bi in 0..b {
                let d = denom[bi];
                let cross: T = (0..c)
                    .map(|ci| dscale[bi * c + ci] * norms[bi * c + ci])
                    .sum::<T>()
                    / (d * d * ct);
                for ci in 0..c {
                    let bc = bi * c + ci;
                    let dnorm = dscale[bc] / d - cross;
                    if norms[bc] > T::zero() {
                        let k = dnorm / norms[bc];
                        for j in bc * hw..(bc + 1) * hw {
                            gx[j] += k * xd[j];
                        }
                    }
                }
            }
            vec![Some(gx), Some(dgamma), Some(dbeta)]
        },
    )
}
