use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Element, Tensor};

/// Batched matrix product `[..., m, k] · [..., k, n] -> [..., m, n]`; the
/// leading (batch) extents must agree exactly.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] || a.dim(ra - 1) != b.dim(rb - 2) {
        return Err(Error::shape(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.dim(ra - 2), a.dim(ra - 1), b.dim(rb - 1));
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm_nn(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.extend([m, n]);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op("matmul", out, shape, vec![a.clone(), b.clone()], move |g| {
        let ga = ac.requires_grad().then(|| {
            let mut ga = vec![T::zero(); batch * m * k];
            for i in 0..batch {
                gemm_nt(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    &bc.data()[i * k * n..(i + 1) * k * n],
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
            }
            ga
        });
        let gb = bc.requires_grad().then(|| {
            let mut gb = vec![T::zero(); batch * k * n];
            for i in 0..batch {
                gemm_tn(
                    k,
                    m,
                    n,
                    &ac.data()[i * m * k..(i + 1) * m * k],
                    &g[i * m * n..(i + 1) * m * n],
                    &mut gb[i * k * n..(i + 1) * k * n],
                );
            }
            gb
        });
        vec![ga, gb]
    })
}

/// Affine map over the trailing axis: `x[..., din] · w[din, dout] + bias[dout]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.rank() == 0 || w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0) {
        return Err(Error::shape(
            "linear",
            format!("input {:?} does not match weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (din, dout) = (w.dim(0), w.dim(1));
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match {dout} outputs", b.shape()),
            ));
        }
    }
    let rows = x.numel() / din;
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_nn(rows, din, dout, x.data(), w.data(), &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut inputs = vec![x.clone(), w.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    Tensor::from_op("linear", out, shape, inputs, move |g| {
        let gx = xc.requires_grad().then(|| {
            let mut gx = vec![T::zero(); rows * din];
            gemm_nt(rows, dout, din, g, wc.data(), &mut gx);
            gx
        });
        let gw = wc.requires_grad().then(|| {
            let mut gw = vec![T::zero(); din * dout];
            gemm_tn(din, rows, dout, xc.data(), g, &mut gw);
            gw
        });
        let mut grads = vec![gx, gw];
        if has_bias {
            let mut gb = vec![T::zero(); dout];
            for row in g.chunks_exact(dout) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            grads.push(Some(gb));
        }
        grads
    })
}
