mod common;

use dmf::attention::{CrossAttention, Former};
use dmf::blocks::{BlockSpec, DmfBlock, Downsample, DyMobile, Grn, Irffn};
use dmf::dyconv::{ConvUnit, DyConvOptions};
use dmf::model::{Model, ModelConfig};
use dmf::nn::{BatchNorm2d, Ctx, Init, Module};
use dmf::tensor::ops;
use dmf::Tensor;
use proptest::prelude::*;

fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data, shape).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    t(common::noise(shape.iter().product(), seed), shape)
}

fn zero(w: &mut Tensor<f64>) {
    *w = Tensor::zeros(w.shape());
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn cross(seed: u64, d: usize, c: usize, heads: usize) -> CrossAttention<f64> {
    let mut m = CrossAttention::new(&mut Init::new(seed), d, c, heads).unwrap();
    common_jitter(&mut m, seed);
    m
}

fn common_jitter<M: Module<f64>>(m: &mut M, seed: u64) {
    let mut s = seed;
    m.visit_mut("", &mut |_, w, _| {
        s += 1;
        let n = common::noise(w.numel(), s);
        *w = t(w.to_vec().iter().zip(n).map(|(a, b)| a + 0.3 * b).collect(), w.shape());
    });
}

#[test]
fn cross_attention_matches_loop_oracle() {
    let (b, m, d, c) = (2, 3, 8, 6);
    let mut ca = cross(1, d, c, 2);
    let z = rand_t(&[b, m, d], 2);
    let x = rand_t(&[b, c, 4, 5], 3);
    let y = ca.forward(&z, &x).unwrap().to_vec();
    let mut oracle = common::Oracle::new(&Model::<f64>::new(ModelConfig::micro()).unwrap());
    oracle.cfg.heads = 2;
    ca.visit_mut("c", &mut |n, w, _| {
        oracle.weights.insert(n.to_string(), w.to_vec());
    });
    let zd = z.to_vec();
    for (i, img) in common::images(&x).iter().enumerate() {
        let tokens: common::Tokens = zd[i * m * d..(i + 1) * m * d].chunks(d).map(|r| r.to_vec()).collect();
        let want: Vec<f64> = oracle.cross("c", &tokens, img).concat();
        assert!(close(&y[i * m * d..(i + 1) * m * d], &want, 1e-12));
    }
}

#[test]
fn single_position_returns_its_values() {
    // N = 1: softmax over one key is 1, so each head reads its channel slice.
    let (d, c) = (4, 4);
    let mut ca = cross(4, d, c, 2);
    ca.wo.weight = t((0..c * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect(), &[c, d]);
    zero(ca.wo.bias.as_mut().unwrap());
    let z = rand_t(&[1, 3, d], 5);
    let x = rand_t(&[1, c, 1, 1], 6);
    let y = ca.forward(&z, &x).unwrap().to_vec();
    for (i, tok) in z.to_vec().chunks(d).enumerate() {
        let want: Vec<f64> = tok.iter().zip(x.to_vec()).map(|(a, b)| a + b).collect();
        assert!(close(&y[i * d..(i + 1) * d], &want, 1e-12));
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    // Every position holds the same vector, so attention averages identical
    // values whatever the queries are.
    let (d, c) = (6, 4);
    let ca = cross(7, d, c, 2);
    let z = rand_t(&[1, 2, d], 8);
    let v = common::noise(c, 9);
    let x = t((0..c * 9).map(|i| v[i / 9]).collect(), &[1, c, 3, 3]);
    let single = t(v, &[1, c, 1, 1]);
    let a = ca.forward(&z, &x).unwrap().to_vec();
    let b = ca.forward(&z, &single).unwrap().to_vec();
    assert!(close(&a, &b, 1e-12));
}

#[test]
fn former_with_zero_output_weights_is_identity() {
    let mut f = Former::<f64>::new(&mut Init::new(3), 8, 2).unwrap();
    common_jitter(&mut f, 3);
    for w in [&mut f.proj.weight, &mut f.fc2.weight] {
        zero(w);
    }
    zero(f.proj.bias.as_mut().unwrap());
    zero(f.fc2.bias.as_mut().unwrap());
    let z = rand_t(&[2, 4, 8], 1);
    assert!(f.forward(&z).unwrap().bit_eq(&z));
}

#[test]
fn former_single_token_attends_to_itself() {
    // M = 1: the attention weight is 1, so the attention output is V.
    let mut f = Former::<f64>::new(&mut Init::new(5), 4, 2).unwrap();
    common_jitter(&mut f, 5);
    zero(&mut f.fc2.weight);
    zero(f.fc2.bias.as_mut().unwrap());
    let z = rand_t(&[1, 1, 4], 2);
    let ln = f.norm1.forward(&z).unwrap();
    let v = ops::narrow(&f.qkv.forward(&ln).unwrap(), 2, 8, 4).unwrap();
    let want = ops::add(&z, &f.proj.forward(&v).unwrap()).unwrap();
    assert!(close(&f.forward(&z).unwrap().to_vec(), &want.to_vec(), 1e-12));
}

#[test]
fn grn_matches_formula() {
    let mut g = Grn::<f64>::new(&mut Init::new(0), 5);
    g.gamma = rand_t(&[5], 1);
    g.beta = rand_t(&[5], 2);
    let x = rand_t(&[2, 5, 3, 4], 3);
    let y = g.forward(&x).unwrap().to_vec();
    let want: Vec<f64> = common::images(&x)
        .iter()
        .flat_map(|img| common::grn(img, &g.gamma.to_vec(), &g.beta.to_vec()).data)
        .collect();
    assert!(close(&y, &want, 1e-6));
}

#[test]
fn bn_pass_through_is_exact_in_eval() {
    let mut bn = BatchNorm2d::<f64>::new(&mut Init::new(0), 3);
    bn.eps = 0.0;
    let x = rand_t(&[2, 3, 4, 4], 1);
    assert!(bn.forward(&x, &Ctx::eval()).unwrap().bit_eq(&x));
}

#[test]
fn irffn_with_zero_projection_is_identity() {
    let mut f = Irffn::<f64>::new(&mut Init::new(1), 4, 2, 0.0);
    zero(&mut f.project.weight);
    let x = rand_t(&[2, 4, 5, 5], 2);
    assert!(f.forward(&x, &mut Ctx::eval()).unwrap().bit_eq(&x));
    assert!(f.forward(&x, &mut Ctx::train(1.0, 0)).unwrap().bit_eq(&x));
}

#[test]
fn irffn_matches_oracle() {
    let mut f = Irffn::<f64>::new(&mut Init::new(1), 4, 3, 0.0);
    common_jitter(&mut f, 9);
    let x = rand_t(&[2, 4, 5, 5], 2);
    let y = f.forward(&x, &mut Ctx::eval()).unwrap().to_vec();
    let mut oracle = common::Oracle::new(&Model::<f64>::new(ModelConfig::micro()).unwrap());
    f.visit("f", &mut |n, w, _| {
        oracle.weights.insert(n.to_string(), w.to_vec());
    });
    let want: Vec<f64> = common::images(&x).iter().flat_map(|img| oracle.irffn("f", img, 3).data).collect();
    assert!(close(&y, &want, 1e-12));
}

#[test]
fn fresh_dy_mobile_equals_its_static_counterpart() {
    let opts = DyConvOptions::default();
    let spec = (8, 8, 3, 2, 1, 6);
    let dy = DyMobile::<f64>::new(&mut Init::new(4), spec.0, spec.1, spec.2, spec.3, spec.4, spec.5, Some(&opts), 0.0)
        .unwrap();
    let mut st =
        DyMobile::<f64>::new(&mut Init::new(99), spec.0, spec.1, spec.2, spec.3, spec.4, spec.5, None, 0.0).unwrap();
    for (s, d) in [(&mut st.expand, &dy.expand), (&mut st.dw, &dy.dw), (&mut st.project, &dy.project)] {
        let (ConvUnit::Static(s), ConvUnit::Dynamic(d)) = (s, d) else { panic!("unit kinds") };
        s.weight = d.kernels.w_agnostic.clone().unwrap();
    }
    let x = rand_t(&[2, 8, 6, 6], 1);
    let z1 = rand_t(&[2, 6], 2);
    for mut ctx in [Ctx::eval(), Ctx::train(30.0, 0)] {
        let a = dy.forward(&x, &z1, &mut ctx).unwrap();
        let b = st.forward(&x, &z1, &mut ctx).unwrap();
        assert!(a.bit_eq(&b));
    }
}

#[test]
fn downsample_with_delta_kernel_subsamples() {
    let mut ds = Downsample::<f64>::new(&mut Init::new(0), 3, 3);
    ds.dw.weight = t((0..27).map(|i| if i % 9 == 4 { 1.0 } else { 0.0 }).collect(), &[3, 1, 3, 3]);
    ds.bn.eps = 0.0;
    let x = rand_t(&[1, 3, 6, 6], 1);
    let y = ds.forward(&x, &Ctx::eval()).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    let xd = x.to_vec();
    let want: Vec<f64> = (0..27).map(|i| xd[(i / 9) * 36 + (i % 9 / 3) * 2 * 6 + (i % 3) * 2]).collect();
    assert_eq!(y.to_vec(), want);
}

#[test]
fn token_path_ablation_keeps_shapes() {
    let mut cfg = ModelConfig::micro();
    let x = rand_t(&[2, 3, 32, 32], 1);
    let on = Model::<f64>::new(cfg.clone()).unwrap().features(&x, &mut Ctx::eval()).unwrap();
    cfg.dyconv.token_input = false;
    let off = Model::<f64>::new(cfg).unwrap().features(&x, &mut Ctx::eval()).unwrap();
    for (a, b) in on.stages.iter().zip(&off.stages) {
        assert_eq!(a.shape(), b.shape());
    }
    assert_eq!(on.tokens.shape(), off.tokens.shape());
}

#[test]
fn train_and_eval_agree_when_stochasticity_is_off() {
    let model = Model::<f32>::new(ModelConfig::micro()).unwrap();
    let x = Tensor::<f32>::from_f64(&common::noise(2 * 3 * 32 * 32, 4), &[2, 3, 32, 32]).unwrap();
    let mut train = Ctx::train(1.0, 7);
    train.freeze_bn = true;
    let a = model.forward(&x, &mut train).unwrap();
    let b = model.forward(&x, &mut Ctx::eval()).unwrap();
    assert!(a.bit_eq(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cross_attention_ignores_spatial_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (c, h, w) = (6, 3, 4);
        let ca = cross(seed, 8, c, 3);
        let z = rand_t(&[2, 5, 8], seed ^ 1);
        let x = rand_t(&[2, c, h, w], seed ^ 2);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let xd = x.to_vec();
        let shuffled: Vec<f64> = (0..xd.len()).map(|i| xd[(i / (h * w)) * h * w + perm[i % (h * w)]]).collect();
        let a = ca.forward(&z, &x).unwrap().to_vec();
        let b = ca.forward(&z, &t(shuffled, &[2, c, h, w])).unwrap().to_vec();
        prop_assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn blocks_preserve_token_shape(m in 1..5usize, heads in 1..3usize, e in 2..6usize, seed in any::<u64>()) {
        let d = 4 * heads;
        let spec = BlockSpec { channels: 8, expansion: 2, irffn_expansion: 2, groups: 2, token_dim: d, heads, drop_path: 0.1 };
        let block = DmfBlock::<f32>::new(&mut Init::new(seed), &spec, Some(&DyConvOptions::default())).unwrap();
        let x = Tensor::<f32>::from_f64(&common::noise(2 * 8 * e * e, seed), &[2, 8, e, e]).unwrap();
        let z = Tensor::<f32>::from_f64(&common::noise(2 * m * d, seed ^ 1), &[2, m, d]).unwrap();
        let (x2, z2) = block.forward(&x, &z, &mut Ctx::train(5.0, seed)).unwrap();
        prop_assert_eq!(x2.shape(), x.shape());
        prop_assert_eq!(z2.shape(), z.shape());
    }
}
