// Shared helpers for the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spd_core::model::{BatchTarget, Model, ModelKind, ModelSpec};
use spd_core::nn::Slot;
use spd_core::ops::{self, ConvSpec, Mode};
use spd_core::{Shape4, Tensor4};

pub const FD_STEP: f64 = 1e-3;
pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const TRIALS: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f64> {
    let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// Standard normal values pushed at least `margin` away from zero, so
/// finite differences never straddle a ReLU kink.
pub fn randn_off_zero(rng: &mut ChaCha8Rng, shape: Shape4, margin: f64) -> Tensor4<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { *v - margin } else { *v + margin };
        }
    }
    t
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error between analytic and central-difference
/// gradients. Elements are compared relative to
/// `max(|a|, |n|, 1e-3 * max|n| over all checked values, 1e-10)`, so
/// entries that are tiny next to the rest (exactly-zero gradients included)
/// are judged on the overall gradient scale.
pub fn fd_error(values: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    fd_error_kinked(values, analytic, |v| (loss(v), Vec::new())).0
}

/// As [`fd_error`], for functions with ReLU kinks: `eval` also returns the
/// on/off pattern of every ReLU, and elements whose perturbation flips any
/// unit are skipped (the function is not differentiable across the step).
/// Returns the worst error and the number of skipped elements.
pub fn fd_error_kinked(
    values: &[f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<bool>),
) -> (f64, usize) {
    assert_eq!(values.len(), analytic.len());
    let mut x = values.to_vec();
    let (_, pattern) = eval(&x);
    let mut numeric = Vec::with_capacity(x.len());
    let mut skipped = 0;
    for i in 0..x.len() {
        let orig = x[i];
        let h = FD_STEP;
        x[i] = orig + h;
        let (up, pu) = eval(&x);
        x[i] = orig - h;
        let (down, pd) = eval(&x);
        x[i] = orig;
        if pu != pattern || pd != pattern {
            skipped += 1;
            numeric.push(None);
        } else {
            numeric.push(Some((up - down) / (2.0 * h)));
        }
    }
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    let worst = analytic
        .iter()
        .zip(&numeric)
        .filter_map(|(&a, n)| n.map(|n| (a - n).abs() / a.abs().max(n.abs()).max(floor)))
        .fold(0.0, f64::max);
    (worst, skipped)
}

pub fn positive(t: &Tensor4<f64>) -> Vec<bool> {
    t.data().iter().map(|&v| v > 0.0).collect()
}

pub fn with_data(shape: Shape4, data: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(shape, data.to_vec()).unwrap()
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv_reference(
    x: &Tensor4<f64>,
    kernel: &Tensor4<f64>,
    bias: &[f64],
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<Tensor4<f64>> {
    let s = x.shape();
    let k = kernel.shape();
    let eff_h = dilation * (k.h - 1) + 1;
    let eff_w = dilation * (k.w - 1) + 1;
    if s.h + 2 * padding < eff_h || s.w + 2 * padding < eff_w {
        return None;
    }
    let oh = (s.h + 2 * padding - eff_h) / stride + 1;
    let ow = (s.w + 2 * padding - eff_w) / stride + 1;
    let mut out = Tensor4::zeros(Shape4::new(s.n, k.n, oh, ow));
    for n in 0..s.n {
        for o in 0..k.n {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..s.c {
                        for i in 0..k.h {
                            for j in 0..k.w {
                                let r = (y * stride + i * dilation) as isize - padding as isize;
                                let q = (xx * stride + j * dilation) as isize - padding as isize;
                                if r < 0 || q < 0 || r >= s.h as isize || q >= s.w as isize {
                                    continue;
                                }
                                acc += kernel.at(o, c, i, j) * x.at(n, c, r as usize, q as usize);
                            }
                        }
                    }
                    out.set(n, o, y, xx, acc);
                }
            }
        }
    }
    Some(out)
}

pub fn conv_spec(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> ConvSpec<f64> {
    let kernel = randn(rng, Shape4::new(out, inp, k, k));
    let bias = (0..out).map(|_| rng.sample(StandardNormal)).collect();
    ConvSpec::new(kernel, bias, stride, dilation, padding).unwrap()
}

/// Flat copy of every learned parameter.
pub fn params(model: &Model<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_ref(&mut |_, t, slot| {
        if slot == Slot::Param {
            out.extend_from_slice(t.data());
        }
    });
    out
}

pub fn grads(model: &Model<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_ref(&mut |_, t, slot| {
        if slot == Slot::Param {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
    });
    out
}

pub fn set_params(model: &mut Model<f64>, values: &[f64]) {
    let mut offset = 0;
    model.visit(&mut |_, t, slot| {
        if slot == Slot::Param {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    });
}

/// Parameter value from a standard normal draw: BN scales near 1, every
/// other parameter at scale 2. Batch statistics then sit far above the
/// finite-difference step, keeping the O(h^2) truncation error of the
/// normalizing layers well under the tolerance.
pub fn random_param(name: &str, z: f64) -> f64 {
    if name.ends_with("gamma") {
        1.0 + 0.2 * z
    } else {
        2.0 * z
    }
}

/// Small `f64` model with every parameter (heads, gamma, beta, biases)
/// randomized so no gradient path is trivially zero.
pub fn random_model(kind: ModelKind, blocks: usize, channels: usize, seed: u64) -> Model<f64> {
    let spec = ModelSpec::new(kind, channels).with_widths(4, 3).with_blocks(blocks);
    let mut model = Model::<f64>::new(spec, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    model.visit(&mut |name, t, slot| {
        if slot != Slot::Param {
            return;
        }
        for v in t.data_mut() {
            *v = random_param(name, r.sample(StandardNormal));
        }
    });
    model
}

pub fn random_target(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> BatchTarget<f64> {
    let labels = (0..n * h * w).map(|_| r.random_range(0..2u8)).collect();
    let density = randn(r, Shape4::new(n, 1, h, w)).map(|v| v.abs());
    BatchTarget::new(labels, density).unwrap()
}

/// Worst gradient error of the joint loss of a model over its parameters
/// and its input, plus the number of kink-skipped elements.
pub fn model_gradient_error(model: &mut Model<f64>, x: &Tensor4<f64>, target: &BatchTarget<f64>) -> (f64, usize) {
    model.zero_grad();
    let (sem, den) = model.forward(x.clone(), Mode::Train).unwrap();
    let (_, gs, gd) = spd_core::model::joint_loss(&sem, &den, target).unwrap();
    let gx = model.backward(&gs, &gd).unwrap();
    let analytic = grads(model);
    let base = params(model);

    let eval = |m: &mut Model<f64>, input: &Tensor4<f64>| {
        let pattern = m
            .block_outputs(input, Mode::Train)
            .unwrap()
            .iter()
            .flat_map(positive)
            .collect();
        let (s, d) = m.forward(input.clone(), Mode::Train).unwrap();
        (spd_core::model::joint_loss(&s, &d, target).unwrap().0.total, pattern)
    };
    let mut probe = model.clone();
    let (e_params, s_params) = fd_error_kinked(&base, &analytic, |p| {
        set_params(&mut probe, p);
        eval(&mut probe, x)
    });
    let mut probe = model.clone();
    let shape = x.shape();
    let (e_input, s_input) = fd_error_kinked(x.data(), gx.data(), |v| eval(&mut probe, &with_data(shape, v)));
    (e_params.max(e_input), s_params + s_input)
}

/// Single-op gradient check: `forward` maps the inputs to an output, the
/// loss is `<w, output>` for a fixed random `w`, `backward` maps `w` to the
/// input gradients. Returns the worst error over all inputs.
pub fn op_gradient_error(
    r: &mut ChaCha8Rng,
    inputs: &[Tensor4<f64>],
    forward: &dyn Fn(&[Tensor4<f64>]) -> Tensor4<f64>,
    backward: &dyn Fn(&[Tensor4<f64>], &Tensor4<f64>) -> Vec<Tensor4<f64>>,
) -> f64 {
    let out = forward(inputs);
    let w = randn(r, out.shape());
    let analytic = backward(inputs, &w);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let shape = inputs[i].shape();
        let e = fd_error(inputs[i].data(), a.data(), |v| {
            let mut probe = inputs.to_vec();
            probe[i] = with_data(shape, v);
            dot(forward(&probe).data(), w.data())
        });
        worst = worst.max(e);
    }
    worst
}

/// One of each differentiable layer kind, checked over `TRIALS` random
/// instances. Returns `(layer, worst error)`.
pub fn layer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    let geometries = [(1, 1, 3), (2, 1, 3), (1, 2, 3), (2, 2, 3), (1, 1, 1), (2, 1, 1)];
    for t in 0..TRIALS {
        let (stride, dilation, k) = geometries[t % geometries.len()];
        let pad = if t % 4 == 3 { 0 } else { dilation * (k - 1) / 2 };
        let spec = conv_spec(&mut r, 3, 2, k, stride, dilation, pad);
        let x = randn(&mut r, Shape4::new(2, 2, 7, 6));
        let fwd = |v: &[Tensor4<f64>]| {
            let s = ConvSpec { kernel: v[1].clone(), bias: v[2].clone(), ..spec.clone() };
            ops::conv2d(&v[0], &s).unwrap()
        };
        let bwd = |v: &[Tensor4<f64>], g: &Tensor4<f64>| {
            let s = ConvSpec { kernel: v[1].clone(), bias: v[2].clone(), ..spec.clone() };
            let gr = ops::conv2d_backward(&v[0], &s, g).unwrap();
            vec![gr.input, gr.kernel, gr.bias]
        };
        worst = worst.max(op_gradient_error(&mut r, &[x, spec.kernel.clone(), spec.bias.clone()], &fwd, &bwd));
    }
    out.push(("conv2d", worst));

    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let x = randn(&mut r, Shape4::new(3, 2, 3, 4));
        let gamma = randn(&mut r, Shape4::new(1, 2, 1, 1));
        let beta = randn(&mut r, Shape4::new(1, 2, 1, 1));
        let state_for = |v: &[Tensor4<f64>]| {
            let mut st = ops::BatchNormState::<f64>::new(2);
            st.gamma = v[1].clone();
            st.beta = v[2].clone();
            st
        };
        let fwd = |v: &[Tensor4<f64>]| ops::batchnorm_train(&v[0], &mut state_for(v)).unwrap().0;
        let bwd = |v: &[Tensor4<f64>], g: &Tensor4<f64>| {
            let (_, cache) = ops::batchnorm_train(&v[0], &mut state_for(v)).unwrap();
            let gr = ops::batchnorm_backward(g, &cache, &v[1]).unwrap();
            vec![gr.input, gr.gamma, gr.beta]
        };
        worst = worst.max(op_gradient_error(&mut r, &[x, gamma, beta], &fwd, &bwd));
    }
    out.push(("batchnorm (train)", worst));

    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let x = randn_off_zero(&mut r, Shape4::new(2, 3, 4, 4), 0.01);
        let fwd = |v: &[Tensor4<f64>]| ops::relu(&v[0]);
        let bwd = |v: &[Tensor4<f64>], g: &Tensor4<f64>| vec![ops::relu_backward(&ops::relu(&v[0]), g).unwrap()];
        worst = worst.max(op_gradient_error(&mut r, &[x], &fwd, &bwd));
    }
    out.push(("relu", worst));

    let mut worst = 0.0f64;
    let sizes = [(4, 5, 8, 10), (3, 3, 7, 5), (8, 6, 4, 3), (2, 2, 5, 5), (5, 4, 5, 4)];
    for t in 0..TRIALS {
        let (ih, iw, oh, ow) = sizes[t % sizes.len()];
        let x = randn(&mut r, Shape4::new(2, 2, ih, iw));
        let fwd = |v: &[Tensor4<f64>]| ops::bilinear_resize(&v[0], oh, ow).unwrap();
        let bwd = |_: &[Tensor4<f64>], g: &Tensor4<f64>| vec![ops::bilinear_resize_backward(g, ih, iw).unwrap()];
        worst = worst.max(op_gradient_error(&mut r, &[x], &fwd, &bwd));
    }
    out.push(("bilinear resize", worst));

    let mut worst = 0.0f64;
    for t in 0..TRIALS {
        let (h, w) = (5 + t % 3, 4 + t % 2);
        let x = randn(&mut r, Shape4::new(2, 2, h, w));
        let fwd = |v: &[Tensor4<f64>]| ops::subsample(&v[0], 2).unwrap();
        let bwd = |_: &[Tensor4<f64>], g: &Tensor4<f64>| vec![ops::subsample_backward(g, 2, h, w).unwrap()];
        worst = worst.max(op_gradient_error(&mut r, &[x], &fwd, &bwd));
    }
    out.push(("subsample", worst));

    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let x = randn(&mut r, Shape4::new(2, 2, 6, 4));
        let fwd = |v: &[Tensor4<f64>]| ops::mean_pool(&v[0], 2).unwrap();
        let bwd = |_: &[Tensor4<f64>], g: &Tensor4<f64>| vec![ops::mean_pool_backward(g, 2).unwrap()];
        worst = worst.max(op_gradient_error(&mut r, &[x], &fwd, &bwd));
    }
    out.push(("mean pool", worst));

    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let a = randn(&mut r, Shape4::new(2, 3, 3, 3));
        let b = randn(&mut r, Shape4::new(2, 3, 3, 3));
        let fwd = |v: &[Tensor4<f64>]| ops::add(&v[0], &v[1]).unwrap();
        let bwd = |_: &[Tensor4<f64>], g: &Tensor4<f64>| {
            let (x, y) = ops::add_backward(g);
            vec![x, y]
        };
        worst = worst.max(op_gradient_error(&mut r, &[a, b], &fwd, &bwd));
    }
    out.push(("add", worst));

    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let logits = randn(&mut r, Shape4::new(2, 2, 3, 4)).map(|v| 2.0 * v);
        let labels: Vec<u8> = (0..24).map(|_| r.random_range(0..2u8)).collect();
        let (_, g) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
        let shape = logits.shape();
        let e = fd_error(logits.data(), g.data(), |v| {
            ops::softmax_cross_entropy(&with_data(shape, v), &labels).unwrap().0
        });
        worst = worst.max(e);
    }
    out.push(("softmax cross-entropy", worst));

    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let pred = randn(&mut r, Shape4::new(2, 1, 4, 3));
        let target = randn(&mut r, Shape4::new(2, 1, 4, 3));
        let (_, g) = ops::mse_loss(&pred, &target).unwrap();
        let shape = pred.shape();
        let e = fd_error(pred.data(), g.data(), |v| ops::mse_loss(&with_data(shape, v), &target).unwrap().0);
        worst = worst.max(e);
    }
    out.push(("squared error", worst));

    out
}

/// Residual blocks (plain, strided, dilated) as layers in their own right.
/// Returns the worst error, kink-skipped elements and checked elements.
pub fn block_gradient_error(seed: u64) -> (f64, usize, usize) {
    use spd_core::nn::ResidualBlock;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let (mut skipped, mut checked) = (0, 0);
    let geometries = [(1, 1), (2, 1), (1, 2)];
    for t in 0..TRIALS {
        let (stride, dilation) = geometries[t % 3];
        let mut block = ResidualBlock::<f64>::new(3, 2, stride, dilation);
        let mut pr = rng(seed + t as u64);
        let mut init = |name: &str, p: &mut Tensor4<f64>, slot: Slot| {
            if slot == Slot::Param {
                for v in p.data_mut() {
                    *v = random_param(name, pr.sample::<f64, _>(StandardNormal));
                }
            }
        };
        block.visit("b", &mut init);
        let x = randn(&mut r, Shape4::new(2, 3, 5, 5));
        let y = block.forward(x.clone(), Mode::Train).unwrap();
        let w = randn(&mut r, y.shape());
        let mut zero = |_: &str, p: &mut Tensor4<f64>, _: Slot| p.zero_grad();
        block.visit("b", &mut zero);
        let gx = block.backward(&w).unwrap();
        let eval = |b: &mut ResidualBlock<f64>, input: Tensor4<f64>| {
            let y = b.forward(input, Mode::Train).unwrap();
            (dot(y.data(), w.data()), positive(&y))
        };

        let mut probe = block.clone();
        let shape = x.shape();
        let (e, s) = fd_error_kinked(x.data(), gx.data(), |v| eval(&mut probe, with_data(shape, v)));
        worst = worst.max(e);
        skipped += s;

        let mut values = Vec::new();
        let mut analytic = Vec::new();
        block.visit_ref("b", &mut |_, p, slot| {
            if slot == Slot::Param {
                values.extend_from_slice(p.data());
                analytic.extend_from_slice(p.grad().unwrap());
            }
        });
        let mut probe = block.clone();
        let (e, s) = fd_error_kinked(&values, &analytic, |v| {
            let mut off = 0;
            probe.visit("b", &mut |_, p, slot| {
                if slot == Slot::Param {
                    let n = p.len();
                    p.data_mut().copy_from_slice(&v[off..off + n]);
                    off += n;
                }
            });
            eval(&mut probe, x.clone())
        });
        worst = worst.max(e);
        skipped += s;
        checked += x.len() + values.len();
    }
    (worst, skipped, checked)
}

/// Full one-block networks of every architecture, end to end through the
/// joint loss. Returns the worst error and the kink-skipped elements.
pub fn end_to_end_gradient_error(seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for (i, kind) in ModelKind::ALL.into_iter().enumerate() {
        // strided_baseline needs two blocks before any stride applies
        let blocks = if kind == ModelKind::StridedBaseline { 2 } else { 1 };
        let mut model = random_model(kind, blocks, 2, seed + i as u64);
        let x = randn(&mut r, Shape4::new(2, 2, 6, 6));
        let target = random_target(&mut r, 2, 6, 6);
        let (e, s) = model_gradient_error(&mut model, &x, &target);
        worst = worst.max(e);
        skipped += s;
    }
    (worst, skipped)
}

/// Every conv geometry with batch <= 2, channels <= 3, sides <= 8, kernel
/// sides <= 3, stride and dilation in {1, 2} and padding in {0, 1, 2}
/// against the nested-loop oracle. Returns `(cases, worst abs error)`;
/// panics if the engine and the oracle disagree on whether the output is
/// empty.
pub fn conv_oracle_sweep(seed: u64) -> (usize, f64) {
    let mut r = rng(seed);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for n in 1..=2 {
        for c in 1..=3 {
            let out_c = 1 + (n + c) % 2;
            for h in 1..=8 {
                for w in 1..=8 {
                    let x = randn(&mut r, Shape4::new(n, c, h, w));
                    for kh in 1..=3 {
                        for kw in 1..=3 {
                            let kernel = randn(&mut r, Shape4::new(out_c, c, kh, kw));
                            let bias: Vec<f64> = (0..out_c).map(|_| r.sample(StandardNormal)).collect();
                            for stride in 1..=2 {
                                for dilation in 1..=2 {
                                    for pad in 0..=2 {
                                        let spec = ConvSpec::new(kernel.clone(), bias.clone(), stride, dilation, pad).unwrap();
                                        let got = ops::conv2d(&x, &spec);
                                        let want = conv_reference(&x, &kernel, &bias, stride, dilation, pad);
                                        cases += 1;
                                        match (got, want) {
                                            (Ok(g), Some(o)) => {
                                                assert_eq!(g.shape(), o.shape());
                                                for (a, b) in g.data().iter().zip(o.data()) {
                                                    worst = worst.max((a - b).abs());
                                                }
                                            }
                                            (Err(_), None) => {}
                                            (g, o) => panic!(
                                                "n{n} c{c} {h}x{w} k{kh}x{kw} s{stride} d{dilation} p{pad}: engine ok={} oracle some={}",
                                                g.is_ok(),
                                                o.is_some()
                                            ),
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (cases, worst)
}

/// 100 random annotation sets of up to 5000 points on K = 10 grids, a
/// quarter of the points on the outermost rows and columns. Returns the
/// worst relative count error; panics if the mask rule or sign is broken.
pub fn gt_conservation_sweep(seed: u64) -> f64 {
    use spd_core::gt::{build_target, PointAnnotationSet, MASK_THRESHOLD};
    let mut r = rng(seed);
    let k = 10;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (lh, lw) = (r.random_range(1..=24), r.random_range(1..=24));
        let (gh, gw) = (lh * k, lw * k);
        let n = r.random_range(0..=5000);
        let points = (0..n)
            .map(|_| {
                if r.random_bool(0.25) {
                    match r.random_range(0..4) {
                        0 => (0, r.random_range(0..gw)),
                        1 => (gh - 1, r.random_range(0..gw)),
                        2 => (r.random_range(0..gh), 0),
                        _ => (r.random_range(0..gh), gw - 1),
                    }
                } else {
                    (r.random_range(0..gh), r.random_range(0..gw))
                }
            })
            .collect();
        let ann = PointAnnotationSet::new(gh, gw, points).unwrap();
        let t = build_target(&ann, k).unwrap();
        let total: f64 = t.density.data.iter().sum();
        let err = if n == 0 { total.abs() } else { (total - n as f64).abs() / n as f64 };
        worst = worst.max(err);
        for (&d, &m) in t.density.data.iter().zip(&t.mask.data) {
            assert!(d >= 0.0, "negative density {d}");
            assert_eq!(m, u8::from(d > MASK_THRESHOLD), "mask disagrees with density {d}");
        }
    }
    worst
}

/// Spatial sizes used for the shape invariants.
pub const SHAPE_SIZES: [(usize, usize); 7] = [(8, 8), (8, 13), (17, 9), (32, 32), (64, 48), (100, 100), (256, 256)];

/// Full-width models of every architecture on every size in
/// [`SHAPE_SIZES`]; returns a description of the first violation.
pub fn shape_invariants(channels: usize) -> std::result::Result<(), String> {
    let models: Vec<Model<f32>> = ModelKind::ALL
        .into_iter()
        .map(|k| Model::new(ModelSpec::new(k, channels), 7).unwrap())
        .collect();
    let (ours, atrous) = (&models[0], &models[1]);
    if ours.parameter_count() != atrous.parameter_count() {
        return Err(format!(
            "parameter counts differ: ours {} vs ours_atrous {}",
            ours.parameter_count(),
            atrous.parameter_count()
        ));
    }
    for m in &models {
        if m.parameter_count() != m.spec().parameter_count() {
            return Err(format!("{} parameter count disagrees with the closed form", m.spec().kind));
        }
    }
    let mut r = rng(3);
    for &(h, w) in &SHAPE_SIZES {
        let x: Tensor4<f32> = randn(&mut r, Shape4::new(1, channels, h, w)).cast();
        for m in &models {
            let (sem, den) = m.infer(&x).map_err(|e| e.to_string())?;
            if sem.shape() != Shape4::new(1, 2, h, w) || den.shape() != Shape4::new(1, 1, h, w) {
                return Err(format!("{} on {h}x{w}: got {} and {}", m.spec().kind, sem.shape(), den.shape()));
            }
            let feat = m.features(&x).map_err(|e| e.to_string())?;
            let stride = m.spec().output_stride();
            let expect = (h.div_ceil(stride), w.div_ceil(stride));
            if (feat.shape().h, feat.shape().w) != expect {
                return Err(format!("{} features on {h}x{w}: {}", m.spec().kind, feat.shape()));
            }
        }
    }
    Ok(())
}
