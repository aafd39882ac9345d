use crate::error::{Error, Result};
use crate::tensor::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use crate::tensor::{Element, Tensor};

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Plan {
    batch: usize,
    groups: usize,
    cout_g: usize,
    geom: ConvGeom,
}

impl Plan {
    fn x_len(&self) -> usize {
        self.geom.cin * self.geom.h * self.geom.w
    }
    fn out_len(&self) -> usize {
        self.cout_g * self.geom.col_cols()
    }
    fn w_len(&self) -> usize {
        self.cout_g * self.geom.col_rows()
    }
}

fn plan(x: &[usize], w: &[usize], stride: usize, padding: usize, groups: usize) -> Result<Plan> {
    let (&[b, cin, h, wd], &[cout, cin_g, kh, kw]) = (x, w) else {
        return Err(Error::shape(
            "conv2d",
            format!("expected x [B,Cin,H,W] and w [Cout,Cin/g,kh,kw], got {x:?} and {w:?}"),
        ));
    };
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::shape(
            "conv2d",
            format!("groups={groups} incompatible with Cin={cin}, Cout={cout}, kernel {w:?}"),
        ));
    }
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(wd, kw, stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} stride {stride} padding {padding} does not fit {h}x{wd}"),
        ));
    };
    Ok(Plan {
        batch: b,
        groups,
        cout_g: cout / groups,
        geom: ConvGeom {
            cin: cin_g,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        },
    })
}

/// Grouped 2-D cross-correlation over `[B,Cin,H,W]` with kernels
/// `[Cout,Cin/groups,kh,kw]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let p = plan(x.shape(), w.shape(), stride, padding, groups)?;
    let cout = p.cout_g * groups;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {cout} channels", b.shape())));
        }
    }
    let g = p.geom;
    let plane = g.col_cols();
    let mut out = vec![T::zero(); p.batch * cout * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane]
    };
    for b in 0..p.batch {
        for gi in 0..groups {
            let unit = b * groups + gi;
            let xs = &x.data()[unit * p.x_len()..(unit + 1) * p.x_len()];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm_nn(
                p.cout_g,
                g.col_rows(),
                plane,
                &w.data()[gi * p.w_len()..(gi + 1) * p.w_len()],
                cols,
                &mut out[unit * p.out_len()..(unit + 1) * p.out_len()],
            );
        }
    }
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let bv = bias.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    let shape = vec![p.batch, cout, g.oh, g.ow];
    let mut inputs = vec![x.clone(), w.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    Tensor::from_op("conv2d", out, shape, inputs, move |gout| {
        conv2d_backward(&p, &xc, &wc, has_bias, gout)
    })
}

fn conv2d_backward<T: Element>(
    p: &Plan,
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    gout: &[T],
) -> Vec<Option<Vec<T>>> {
    let g = p.geom;
    let plane = g.col_cols();
    let want_x = x.requires_grad();
    let want_w = w.requires_grad();
    let mut gx = want_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.numel()]);
    let mut col = vec![T::zero(); g.col_rows() * plane];
    let mut dcol = vec![T::zero(); g.col_rows() * plane];
    for b in 0..p.batch {
        for gi in 0..p.groups {
            let unit = b * p.groups + gi;
            let go = &gout[unit * p.out_len()..(unit + 1) * p.out_len()];
            let wg = &w.data()[gi * p.w_len()..(gi + 1) * p.w_len()];
            let xs = &x.data()[unit * p.x_len()..(unit + 1) * p.x_len()];
            if let Some(gw) = gw.as_mut() {
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut col);
                    &col
                };
                gemm_nt(
                    p.cout_g,
                    plane,
                    g.col_rows(),
                    go,
                    cols,
                    &mut gw[gi * p.w_len()..(gi + 1) * p.w_len()],
                );
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[unit * p.x_len()..(unit + 1) * p.x_len()];
                if g.is_pointwise() {
                    gemm_tn(g.col_rows(), p.cout_g, plane, wg, go, dst);
                } else {
                    dcol.iter_mut().for_each(|v| *v = T::zero());
                    gemm_tn(g.col_rows(), p.cout_g, plane, wg, go, &mut dcol);
                    col2im(&dcol, &g, dst);
                }
            }
        }
    }
    let mut grads = vec![gx, gw];
    if has_bias {
        let cout = p.cout_g * p.groups;
        let mut gb = vec![T::zero(); cout];
        for (i, chunk) in gout.chunks_exact(plane).enumerate() {
            gb[i % cout] += chunk.iter().copied().sum::<T>();
        }
        grads.push(Some(gb));
    }
    grads
}
