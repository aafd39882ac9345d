use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn sum<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op("sum", vec![s], Vec::new(), vec![x.clone()], move |g| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.numel();
    if n == 0 {
        return Err(Error::shape("mean", "empty tensor"));
    }
    let inv = T::one() / T::lit(n as f64);
    let s: T = x.data().iter().copied().sum();
    Tensor::from_op("mean", vec![s * inv], Vec::new(), vec![x.clone()], move |g| {
        vec![Some(vec![g[0] * inv; n])]
    })
}

/// Per-channel mean over spatial positions: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected [B,C,H,W], got {:?}", x.shape()),
        ));
    };
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::one() / T::lit(hw as f64);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_op("global_avg_pool", data, vec![b, c], vec![x.clone()], move |g| {
        let mut gx = Vec::with_capacity(b * c * hw);
        for &gv in g {
            gx.extend(std::iter::repeat(gv * inv).take(hw));
        }
        vec![Some(gx)]
    })
}
