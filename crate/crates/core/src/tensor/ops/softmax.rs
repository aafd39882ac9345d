use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let n = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(xd[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                out[base + j * inner] /= total;
            }
        }
    }
    let saved = out.clone();
    Tensor::from_op("softmax", out, x.shape().to_vec(), vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); saved.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let dot: T = (0..n).map(|j| g[base + j * inner] * saved[base + j * inner]).sum();
                for j in 0..n {
                    let k = base + j * inner;
                    gx[k] = saved[k] * (g[k] - dot);
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Mean cross-entropy of `logits[B, classes]` against integer targets, with
/// optional label smoothing.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, targets: &[usize], smoothing: f64) -> Result<Tensor<T>> {
    let &[b, c] = logits.shape() else {
        return Err(Error::shape("cross_entropy", format!("expected [B, classes], got {:?}", logits.shape())));
    };
    if targets.len() != b || targets.iter().any(|&t| t >= c) {
        return Err(Error::shape("cross_entropy", format!("{} targets for batch {b} with {c} classes", targets.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let on = T::lit(1.0 - smoothing + smoothing / c as f64);
    let off = T::lit(smoothing / c as f64);
    let mut probs = vec![T::zero(); b * c];
    let mut loss = T::zero();
    for (row, (&t, p)) in logits.data().chunks_exact(c).zip(targets.iter().zip(probs.chunks_exact_mut(c))) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        for (j, (&v, pj)) in row.iter().zip(p.iter_mut()).enumerate() {
            *pj = (v - lse).exp();
            let q = if j == t { on } else { off };
            loss -= q * (v - lse);
        }
    }
    let inv_b = T::one() / T::lit(b as f64);
    let targets = targets.to_vec();
    Tensor::from_op("cross_entropy", vec![loss * inv_b], Vec::new(), vec![logits.clone()], move |g| {
        let s = g[0] * inv_b;
        let mut gx = Vec::with_capacity(b * c);
        for (p, &t) in probs.chunks_exact(c).zip(&targets) {
            for (j, &pj) in p.iter().enumerate() {
                let q = if j == t { on } else { off };
                gx.push((pj - q) * s);
            }
        }
        vec![Some(gx)]
    })
}
