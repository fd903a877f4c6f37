mod common;

use std::time::Instant;

use common::{naive_conv, naive_pool, rng, Vol};
use dps_core::tensor::{
    channel_unit_normalize, concat_channels, conv2d, maxpool2d_with, relu, Kernels, PoolRounding,
    Tensor3, DEFAULT_UNIT_EPSILON,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

fn vol(t: &Tensor3) -> Vol {
    let (c, h, w) = t.shape();
    Vol {
        c,
        h,
        w,
        v: t.data().iter().map(|&x| f64::from(x)).collect(),
    }
}

fn max_abs_diff(t: &Tensor3, v: &Vol) -> f64 {
    assert_eq!(t.shape(), (v.c, v.h, v.w));
    t.data()
        .iter()
        .zip(&v.v)
        .map(|(&a, &b)| (f64::from(a) - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv_and_pool_match_naive_oracles() {
    let start = Instant::now();
    let mut rng = rng(2024);
    for case in 0..200 {
        let (ci, co) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let pad = rng.random_range(0..=2);
        let k = rng.random_range(1..=(h.min(w) + 2 * pad).min(8));
        let stride = rng.random_range(1..=3);
        let input = random_tensor(&mut rng, ci, h, w);
        let weights: Vec<f32> = (0..co * ci * k * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernels = Kernels::new(co, ci, k, k, weights.clone()).unwrap();
        let got = conv2d(&input, &kernels, &bias, stride, pad).unwrap();
        let want = naive_conv(&vol(&input), &weights, &bias, co, k, stride, pad);
        assert!(max_abs_diff(&got, &want) <= 1e-5, "conv case {case}");

        let pk = rng.random_range(1..=h.min(w));
        let ps = rng.random_range(1..=3);
        for (rounding, ceil) in [(PoolRounding::Floor, false), (PoolRounding::Ceil, true)] {
            let got = maxpool2d_with(&input, pk, ps, rounding).unwrap();
            let want = naive_pool(&vol(&input), pk, ps, ceil);
            assert!(
                max_abs_diff(&got, &want) <= 1e-5,
                "pool case {case} {rounding:?}"
            );
        }
    }
    assert!(
        start.elapsed().as_secs_f64() < 10.0,
        "took {:?}",
        start.elapsed()
    );
}

#[test]
fn relu_and_concat() {
    let mut rng = rng(3);
    let a = random_tensor(&mut rng, 2, 3, 4);
    let b = random_tensor(&mut rng, 3, 3, 4);
    let r = relu(&a);
    assert!(r
        .data()
        .iter()
        .zip(a.data())
        .all(|(&y, &x)| y == x.max(0.0)));
    let cat = concat_channels(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(cat.shape(), (5, 3, 4));
    assert_eq!(cat.channel(1), a.channel(1));
    assert_eq!(cat.channel(4), b.channel(2));
    assert!(concat_channels(&[a, random_tensor(&mut rng, 1, 2, 4)]).is_err());
}

#[test]
fn unit_normalized_lengths() {
    let mut rng = rng(8);
    for _ in 0..50 {
        let (c, h, w) = (
            rng.random_range(1..=16),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let scale = 10f32.powf(rng.random_range(-2.0..3.0));
        let t = Tensor3::from_fn(c, h, w, |_, _, _| scale * rng.random_range(-1.0..1.0f32));
        let n = channel_unit_normalize(&t, DEFAULT_UNIT_EPSILON);
        for y in 0..h {
            for x in 0..w {
                let len_in: f64 = (0..c)
                    .map(|k| f64::from(t.get(k, y, x)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let len: f64 = (0..c)
                    .map(|k| f64::from(n.get(k, y, x)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(len <= 1.0 + 1e-6);
                if len_in >= 1e-3 {
                    assert!(len >= 1.0 - 1e-3, "input length {len_in} gave {len}");
                }
            }
        }
    }
    let zero = Tensor3::zeros(4, 2, 2);
    assert_eq!(channel_unit_normalize(&zero, DEFAULT_UNIT_EPSILON), zero);
}

mod properties {
    use super::*;
    use dps_core::tensor::maxpool2d;
    use proptest::prelude::*;
    use rand::Rng;

    fn circular_shift(t: &Tensor3, dy: usize, dx: usize) -> Tensor3 {
        let (_, h, w) = t.shape();
        Tensor3::from_fn(t.channels(), h, w, |c, y, x| {
            t.get(c, (y + h - dy % h) % h, (x + w - dx % w) % w)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conv_is_linear(seed: u64, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = common::rng(seed);
            let (ci, co, h, w) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(3..=8), rng.random_range(3..=8));
            let k = rng.random_range(1..=3);
            let x = random_tensor(&mut rng, ci, h, w);
            let y = random_tensor(&mut rng, ci, h, w);
            let weights: Vec<f32> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kernels = Kernels::new(co, ci, k, k, weights).unwrap();
            let bias = vec![0.0; co];
            let combo = Tensor3::new(ci, h, w, x.data().iter().zip(y.data()).map(|(&p, &q)| a * p + b * q).collect()).unwrap();
            let lhs = conv2d(&combo, &kernels, &bias, 1, 1).unwrap();
            let (cx, cy) = (conv2d(&x, &kernels, &bias, 1, 1).unwrap(), conv2d(&y, &kernels, &bias, 1, 1).unwrap());
            for ((&l, &p), &q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
                prop_assert!((l - (a * p + b * q)).abs() <= 1e-4);
            }
        }

        #[test]
        fn pool_and_relu_commute_with_stride_shifts(seed: u64, stride in 1usize..=3, tiles_h in 1usize..=4, tiles_w in 1usize..=4, sy in 0usize..4, sx in 0usize..4) {
            let mut rng = common::rng(seed);
            let t = random_tensor(&mut rng, 3, stride * tiles_h, stride * tiles_w);
            let (dy, dx) = (sy * stride, sx * stride);
            let pooled_then_shifted = circular_shift(&maxpool2d(&t, stride, stride).unwrap(), sy, sx);
            let shifted_then_pooled = maxpool2d(&circular_shift(&t, dy, dx), stride, stride).unwrap();
            prop_assert_eq!(pooled_then_shifted, shifted_then_pooled);
            prop_assert_eq!(relu(&circular_shift(&t, dy + 1, dx)), circular_shift(&relu(&t), dy + 1, dx));
        }

        #[test]
        fn ops_are_bit_deterministic(seed: u64) {
            let mut rng = common::rng(seed);
            let x = random_tensor(&mut rng, 5, 8, 8);
            let weights: Vec<f32> = (0..6 * 5 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kernels = Kernels::new(6, 5, 3, 3, weights).unwrap();
            let bias = vec![0.1; 6];
            prop_assert_eq!(conv2d(&x, &kernels, &bias, 2, 1).unwrap(), conv2d(&x, &kernels, &bias, 2, 1).unwrap());
            prop_assert_eq!(
                channel_unit_normalize(&x, DEFAULT_UNIT_EPSILON),
                channel_unit_normalize(&x, DEFAULT_UNIT_EPSILON)
            );
        }
    }
}
