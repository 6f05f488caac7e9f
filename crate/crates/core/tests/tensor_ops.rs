mod common;

use common::*;
use proptest::prelude::*;
use spd_core::ops::{self, BatchNormState, ConvSpec, Mode};
use spd_core::{Shape4, Tensor4};

#[test]
fn conv_matches_nested_loops_on_exhaustive_grid() {
    let (cases, worst) = conv_oracle_sweep(21);
    assert_eq!(cases, 2 * 3 * 64 * 9 * 2 * 2 * 3);
    assert!(worst <= 1e-6, "worst abs error {worst:e}");
}

#[test]
fn conv_matches_nested_loops_in_f32() {
    let mut r = rng(22);
    for (stride, dilation) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
        let x = randn(&mut r, Shape4::new(2, 3, 8, 8));
        let spec = conv_spec(&mut r, 2, 3, 3, stride, dilation, dilation);
        let want = conv_reference(&x, &spec.kernel, spec.bias.data(), stride, dilation, dilation).unwrap();
        let spec32 = ConvSpec {
            kernel: spec.kernel.cast::<f32>(),
            bias: spec.bias.cast::<f32>(),
            stride,
            dilation,
            padding: dilation,
        };
        let got = ops::conv2d(&x.cast::<f32>(), &spec32).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn dilated_impulse_stamps_the_kernel() {
    // a unit impulse correlated with k gives k reversed around the impulse
    // at dilated offsets
    let k = Tensor4::from_fn(Shape4::new(1, 1, 3, 3), |_, _, i, j| (1 + 3 * i + j) as f64);
    let spec = ConvSpec::new(k.clone(), vec![0.0], 1, 2, 2).unwrap();
    let mut x = Tensor4::zeros(Shape4::new(1, 1, 9, 9));
    x.set(0, 0, 4, 4, 1.0);
    let y = ops::conv2d(&x, &spec).unwrap();
    for r in 0..9 {
        for c in 0..9 {
            let (dr, dc) = (4 - r as isize, 4 - c as isize);
            let expected = if dr % 2 == 0 && dc % 2 == 0 && dr.abs() <= 2 && dc.abs() <= 2 {
                k.at(0, 0, (1 + dr / 2) as usize, (1 + dc / 2) as usize)
            } else {
                0.0
            };
            assert_eq!(y.at(0, 0, r, c), expected, "({r},{c})");
        }
    }
}

#[test]
fn batchnorm_matches_two_pass_formula() {
    let mut r = rng(23);
    let x = randn(&mut r, Shape4::new(2, 3, 4, 4));
    let mut st = BatchNormState::<f64>::new(3);
    st.gamma = randn(&mut r, Shape4::new(1, 3, 1, 1));
    st.beta = randn(&mut r, Shape4::new(1, 3, 1, 1));
    let y = ops::batchnorm(&x, &mut st).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| x.plane(n, c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        for n in 0..2 {
            for (i, &v) in x.plane(n, c).iter().enumerate() {
                let want = st.gamma.data()[c] * (v - mean) / (var + 1e-5).sqrt() + st.beta.data()[c];
                assert!((y.plane(n, c)[i] - want).abs() < 1e-6);
            }
        }
        // running statistics moved one momentum step toward the batch
        assert!((st.running_mean.data()[c] - 0.1 * mean).abs() < 1e-12);
        assert!((st.running_var.data()[c] - (0.9 + 0.1 * var * 32.0 / 31.0)).abs() < 1e-12);
    }
    st.mode = Mode::Eval;
    let eval = ops::batchnorm(&x, &mut st).unwrap();
    assert_eq!(eval, ops::batchnorm_eval(&x, &st).unwrap());
}

#[test]
fn batchnorm_constant_input_gives_beta() {
    let x = Tensor4::full(Shape4::new(2, 2, 3, 3), 4.5f64);
    let mut st = BatchNormState::<f64>::new(2);
    st.beta = Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![0.25, -1.0]).unwrap();
    let y = ops::batchnorm(&x, &mut st).unwrap();
    assert!(y.plane(1, 0).iter().all(|&v| v == 0.25));
    assert!(y.plane(0, 1).iter().all(|&v| v == -1.0));
    let single = Tensor4::full(Shape4::new(1, 2, 1, 1), 1.0f64);
    assert!(ops::batchnorm(&single, &mut BatchNormState::new(2)).is_err());
}

proptest! {
    #[test]
    fn add_commutes(vals in prop::collection::vec(-1e3f64..1e3, 24)) {
        let a = Tensor4::from_vec(Shape4::new(1, 2, 3, 2), vals[..12].to_vec()).unwrap();
        let b = Tensor4::from_vec(Shape4::new(1, 2, 3, 2), vals[12..].to_vec()).unwrap();
        prop_assert_eq!(ops::add(&a, &b).unwrap(), ops::add(&b, &a).unwrap());
    }

    #[test]
    fn mean_pool_conserves_sum(vals in prop::collection::vec(-10f64..10.0, 72), k in 1usize..=3) {
        let x = Tensor4::from_vec(Shape4::new(2, 1, 6, 6), vals).unwrap();
        let y = ops::mean_pool(&x, k).unwrap();
        prop_assert!((y.sum() * (k * k) as f64 - x.sum()).abs() < 1e-5);
    }

    #[test]
    fn resize_of_constant_is_constant(v in -5f64..5.0, h in 1usize..7, w in 1usize..7, nh in 1usize..12, nw in 1usize..12) {
        let x = Tensor4::full(Shape4::new(1, 1, h, w), v);
        let y = ops::bilinear_resize(&x, nh, nw).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }

    #[test]
    fn relu_is_identity_on_nonnegative(vals in prop::collection::vec(0f64..100.0, 8)) {
        let x = Tensor4::from_vec(Shape4::new(1, 2, 2, 2), vals).unwrap();
        prop_assert_eq!(ops::relu(&x), x);
    }
}
