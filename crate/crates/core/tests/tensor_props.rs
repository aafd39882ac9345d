mod common;

use dmf::tensor::ops;
use dmf::{Error, Tensor};
use proptest::prelude::*;

fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data, shape).unwrap()
}

fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    t(data, shape).into_leaf(true)
}

#[test]
fn sum_gradient_is_ones() {
    let x = leaf(vec![1.0, -2.0, 3.5, 0.0], &[2, 2]);
    ops::sum(&x).unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap().to_vec(), vec![1.0; 4]);
}

#[test]
fn half_square_gradient_is_x() {
    let x = leaf(vec![1.0, -2.0, 3.5], &[3]);
    let loss = ops::scale(&ops::sum(&ops::mul(&x, &x).unwrap()).unwrap(), 0.5).unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().to_vec(), x.to_vec());
}

#[test]
fn backward_errors() {
    let x = leaf(vec![1.0, 2.0], &[2]);
    assert!(matches!(ops::scale(&x, 2.0).unwrap().backward(), Err(Error::Autograd(_))));
    let detached = ops::sum(&x.detach()).unwrap();
    assert!(matches!(detached.backward(), Err(Error::Autograd(_))));
}

#[test]
fn shared_subgraph_is_visited_once() {
    // y = x·x used twice: d/dx (y + y) = 4x.
    let x = leaf(vec![3.0], &[1]);
    let y = ops::mul(&x, &x).unwrap();
    ops::sum(&ops::add(&y, &y).unwrap()).unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap().to_vec(), vec![12.0]);
}

#[test]
fn every_leaf_gets_a_gradient() {
    let a = leaf(vec![1.0, 2.0], &[2]);
    let b = leaf(vec![0.5, 0.5], &[2]);
    let unused_path = leaf(vec![7.0], &[1]);
    let loss = ops::add(
        &ops::sum(&ops::mul(&a, &b).unwrap()).unwrap(),
        &ops::scale(&ops::sum(&unused_path).unwrap(), 0.0).unwrap(),
    )
    .unwrap();
    loss.backward().unwrap();
    for x in [&a, &b, &unused_path] {
        assert_eq!(x.grad().unwrap().shape(), x.shape());
    }
}

#[test]
fn non_finite_output_is_an_error() {
    let x = t(vec![1.0, 0.0], &[2]);
    let zero = t(vec![0.0, 0.0], &[2]);
    assert!(matches!(ops::div(&x, &zero), Err(Error::NonFinite { .. })));
}

#[test]
fn gelu_tanh_form_stays_close_to_erf_form() {
    let xs: Vec<f64> = (-800..=800).map(|i| i as f64 / 100.0).collect();
    let y = ops::gelu(&t(xs.clone(), &[xs.len()])).unwrap();
    let worst = xs
        .iter()
        .zip(y.to_vec())
        .map(|(&x, g)| (g - 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, u64)> {
    // (batch, groups, cin_per_group, cout_per_group, kernel, stride, extent, seed)
    (1..3usize, 1..4usize, 1..3usize, 1..3usize, prop::sample::select(vec![1usize, 3, 5]), 1..3usize, 5..9usize, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shape_and_data_length_agree(shape in prop::collection::vec(1..5usize, 0..4), extra in 1..3usize) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::<f32>::from_vec(vec![0.0; n], &shape).is_ok());
        prop_assert!(Tensor::<f32>::from_vec(vec![0.0; n + extra], &shape).is_err());
    }

    #[test]
    fn conv_matches_loop_oracle((b, g, cig, cog, k, s, e, seed) in conv_case()) {
        let (cin, cout) = (cig * g, cog * g);
        let x = common::noise(b * cin * e * e, seed);
        let w = common::noise(cout * cig * k * k, seed ^ 1);
        let y = ops::conv2d(&t(x.clone(), &[b, cin, e, e]), &t(w.clone(), &[cout, cig, k, k]), None, s, k / 2, g).unwrap();
        let mut macs = 0;
        let want: Vec<f64> = common::images(&t(x, &[b, cin, e, e]))
            .iter()
            .flat_map(|img| common::conv(img, &w, cout, k, s, g, &mut macs).data)
            .collect();
        for (a, b) in y.to_vec().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(y.numel(), want.len());
    }

    #[test]
    fn depthwise_is_per_channel_conv(c in 1..5usize, e in 3..8usize, seed in any::<u64>()) {
        let x = common::noise(c * e * e, seed);
        let w = common::noise(c * 9, seed ^ 3);
        let y = ops::conv2d(&t(x.clone(), &[1, c, e, e]), &t(w.clone(), &[c, 1, 3, 3]), None, 1, 1, c).unwrap();
        for ch in 0..c {
            let xc = t(x[ch * e * e..(ch + 1) * e * e].to_vec(), &[1, 1, e, e]);
            let wc = t(w[ch * 9..(ch + 1) * 9].to_vec(), &[1, 1, 3, 3]);
            let yc = ops::conv2d(&xc, &wc, None, 1, 1, 1).unwrap();
            prop_assert_eq!(&y.to_vec()[ch * e * e..(ch + 1) * e * e], &yc.to_vec()[..]);
        }
    }

    #[test]
    fn conv_is_linear_in_the_kernel((b, g, cig, cog, k, s, e, seed) in conv_case(), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let (cin, cout) = (cig * g, cog * g);
        let x = t(common::noise(b * cin * e * e, seed), &[b, cin, e, e]);
        let wshape = [cout, cig, k, k];
        let w1 = common::noise(cout * cig * k * k, seed ^ 5);
        let w2 = common::noise(cout * cig * k * k, seed ^ 7);
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = ops::conv2d(&x, &t(mix, &wshape), None, s, k / 2, g).unwrap().to_vec();
        let y1 = ops::conv2d(&x, &t(w1, &wshape), None, s, k / 2, g).unwrap().to_vec();
        let y2 = ops::conv2d(&x, &t(w2, &wshape), None, s, k / 2, g).unwrap().to_vec();
        let scale = lhs.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (alpha * y1[i] + beta * y2[i])).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1..5usize, cols in 1..9usize, spread in 0.1..60.0f32, seed in any::<u64>()) {
        let data: Vec<f32> = common::noise(rows * cols, seed).iter().map(|v| *v as f32 * spread).collect();
        let s = ops::softmax(&Tensor::from_vec(data, &[rows, cols]).unwrap(), 1).unwrap();
        for row in s.to_vec().chunks(cols) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let x = Tensor::<f32>::from_f64(&common::noise(2 * 4 * 6 * 6, seed), &[2, 4, 6, 6]).unwrap();
        let w = Tensor::<f32>::from_f64(&common::noise(8 * 2 * 9, seed ^ 9), &[8, 2, 3, 3]).unwrap();
        let run = || ops::gelu(&ops::conv2d(&x, &w, None, 1, 1, 2).unwrap()).unwrap();
        prop_assert!(run().bit_eq(&run()));
    }

    #[test]
    fn gradient_has_data_shape(rows in 1..4usize, cols in 1..5usize, seed in any::<u64>()) {
        let x = leaf(common::noise(rows * cols, seed), &[rows, cols]);
        ops::sum(&ops::softmax(&ops::mul(&x, &x).unwrap(), 1).unwrap()).unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        prop_assert_eq!(g.shape(), x.shape());
    }
}
