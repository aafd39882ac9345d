use super::elementwise::{broadcast_index, broadcast_shape};
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {:?}", x.shape(), shape),
        ));
    }
    Tensor::from_op("reshape", x.to_vec(), shape.to_vec(), vec![x.clone()], |g| {
        vec![Some(g.to_vec())]
    })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset of each output element when `out[i..] = x[perm applied]`.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let n = numel(shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; perm.len()];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for ax in (0..perm.len()).rev() {
            counter[ax] += 1;
            off += out_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= out_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let mut seen = vec![false; x.rank()];
    if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of {} axes", x.rank()),
        ));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
    let idx = permute_index(x.shape(), perm);
    let xd = x.data();
    let data = idx.iter().map(|&i| xd[i]).collect();
    Tensor::from_op("permute", data, out_shape, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); g.len()];
        for (&i, &gv) in idx.iter().zip(g) {
            gx[i] = gv;
        }
        vec![Some(gx)]
    })
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<T: Element>(xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", format!("axis {axis} out of range")));
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && (0..x.rank()).all(|a| a == axis || x.dim(a) == first.dim(a));
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", x.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = xs.iter().map(|x| x.dim(axis) * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = xs.iter().map(|x| x.dim(axis)).sum();
    let mut data = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (x, &w) in xs.iter().zip(&widths) {
            data.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::from_op("concat", data, out_shape, xs.to_vec(), move |g| {
        let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
        for o in 0..outer {
            let mut off = o * total;
            for (gx, &w) in grads.iter_mut().zip(&widths) {
                gx.extend_from_slice(&g[off..off + w]);
                off += w;
            }
        }
        grads.into_iter().map(Some).collect()
    })
}

/// The slice `start..start+len` of `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.dim(axis) {
        return Err(Error::shape(
            "narrow",
            format!("{start}..{} outside axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.dim(axis) * inner;
    let (lo, w) = (start * inner, len * inner);
    let mut data = Vec::with_capacity(outer * w);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[o * full + lo..o * full + lo + w]);
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let n = x.numel();
    Tensor::from_op("narrow", data, out_shape, vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); n];
        for o in 0..outer {
            gx[o * full + lo..o * full + lo + w].copy_from_slice(&g[o * w..(o + 1) * w]);
        }
        vec![Some(gx)]
    })
}

pub fn broadcast_to<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if broadcast_shape(x.shape(), shape).as_deref() != Some(shape) {
        return Err(Error::shape(
            "broadcast_to",
            format!("cannot broadcast {:?} to {shape:?}", x.shape()),
        ));
    }
    let idx = broadcast_index(x.shape(), shape);
    let xd = x.data();
    let data = idx.iter().map(|&i| xd[i]).collect();
    let n = x.numel();
    Tensor::from_op("broadcast_to", data, shape.to_vec(), vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); n];
        for (&i, &gv) in idx.iter().zip(g) {
            gx[i] += gv;
        }
        vec![Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let y = permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(permute(&x, &[0, 0]).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_f64(&[5., 6.], &[2, 1]).unwrap();
        let c = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert!(narrow(&c, 1, 0, 2).unwrap().bit_eq(&a));
        assert!(narrow(&c, 1, 2, 1).unwrap().bit_eq(&b));
        assert!(narrow(&c, 1, 2, 2).is_err());
    }
}
